//! Image quality metrics: MSE, PSNR and SSIM on 255-scaled intensities,
//! plus directory-level evaluation with per-image rows and aggregates.
//!
//! Identical images have zero MSE; their PSNR is reported as an explicit
//! infinite sentinel and excluded from the aggregate mean with a note.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{gaussian_kernel, io, Image};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimParams {
    pub c1: f64,
    pub c2: f64,
    pub mode: SsimMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SsimMode {
    /// Statistics over the whole image.
    Global,
    /// 11x11 Gaussian window (sigma 1.5), mean over valid windows.
    Windowed,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            c1: (0.01f64 * 255.0) * (0.01 * 255.0),
            c2: (0.03f64 * 255.0) * (0.03 * 255.0),
            mode: SsimMode::Global,
        }
    }
}

fn check_pair(x: &Image, y: &Image) -> Result<()> {
    if x.width() != y.width() || x.height() != y.height() {
        return Err(Error::Parameter(format!(
            "image shapes differ: {}x{} vs {}x{}",
            x.width(),
            y.width(),
            x.height(),
            y.height()
        )));
    }
    Ok(())
}

/// Mean squared error in 255-scaled units squared. Multi-channel inputs are
/// collapsed to their channel mean first.
pub fn mse(x: &Image, y: &Image) -> Result<f64> {
    check_pair(x, y)?;
    let (x, y) = (x.to_gray(), y.to_gray());
    let n = (x.width() * x.height()) as f64;
    let sum: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| {
            let d = 255.0 * a - 255.0 * b;
            d * d
        })
        .sum();
    Ok(sum / n)
}

/// Peak signal-to-noise ratio in dB: `10 * log10(255^2 / mse)`.
/// `None` is the infinite-PSNR sentinel for identical images.
pub fn psnr(x: &Image, y: &Image) -> Result<Option<f64>> {
    let m = mse(x, y)?;
    if m == 0.0 {
        return Ok(None);
    }
    Ok(Some(10.0 * (255.0 * 255.0 / m).log10()))
}

/// Structural similarity on 255-scaled single-channel statistics.
pub fn ssim(x: &Image, y: &Image, p: &SsimParams) -> Result<f64> {
    check_pair(x, y)?;
    let (x, y) = (x.to_gray(), y.to_gray());
    match p.mode {
        SsimMode::Global => Ok(ssim_global(x.data(), y.data(), p)),
        SsimMode::Windowed => ssim_windowed(&x, &y, p),
    }
}

fn ssim_global(x: &[f64], y: &[f64], p: &SsimParams) -> f64 {
    let n = x.len() as f64;
    let mut mx = 0.0;
    let mut my = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        mx += 255.0 * a;
        my += 255.0 * b;
    }
    mx /= n;
    my /= n;
    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let da = 255.0 * a - mx;
        let db = 255.0 * b - my;
        vx += da * da;
        vy += db * db;
        cov += da * db;
    }
    vx /= n;
    vy /= n;
    cov /= n;
    ssim_formula(mx, my, vx, vy, cov, p)
}

#[inline]
fn ssim_formula(mx: f64, my: f64, vx: f64, vy: f64, cov: f64, p: &SsimParams) -> f64 {
    ((2.0 * mx * my + p.c1) * (2.0 * cov + p.c2))
        / ((mx * mx + my * my + p.c1) * (vx + vy + p.c2))
}

fn ssim_windowed(x: &Image, y: &Image, p: &SsimParams) -> Result<f64> {
    const WIN: usize = 11;
    let (w, h) = (x.width(), x.height());
    if w < WIN || h < WIN {
        return Err(Error::Parameter(format!(
            "windowed ssim needs at least {WIN}x{WIN} pixels, got {w}x{h}"
        )));
    }
    let taps = gaussian_kernel(WIN, 1.5);
    // 2D weights, normalized to sum 1 (outer product of normalized taps).
    let mut weights = vec![0.0; WIN * WIN];
    for j in 0..WIN {
        for i in 0..WIN {
            weights[j * WIN + i] = taps[j] * taps[i];
        }
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for oy in 0..=(h - WIN) {
        for ox in 0..=(w - WIN) {
            let (mut mx, mut my) = (0.0, 0.0);
            for j in 0..WIN {
                for i in 0..WIN {
                    let wgt = weights[j * WIN + i];
                    mx += wgt * 255.0 * x.get(ox + i, oy + j, 0);
                    my += wgt * 255.0 * y.get(ox + i, oy + j, 0);
                }
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for j in 0..WIN {
                for i in 0..WIN {
                    let wgt = weights[j * WIN + i];
                    let da = 255.0 * x.get(ox + i, oy + j, 0) - mx;
                    let db = 255.0 * y.get(ox + i, oy + j, 0) - my;
                    vx += wgt * da * da;
                    vy += wgt * db * db;
                    cov += wgt * da * db;
                }
            }
            total += ssim_formula(mx, my, vx, vy, cov, p);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone)]
pub struct MetricRow {
    pub id: String,
    pub mse: f64,
    /// `None` marks the infinite-PSNR sentinel (identical images).
    pub psnr: Option<f64>,
    pub ssim: f64,
}

#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub errors: Vec<String>,
    /// Mean over rows with finite PSNR.
    pub mean_psnr: Option<f64>,
    pub mean_ssim: Option<f64>,
    pub infinite_psnr_count: usize,
}

impl MetricReport {
    fn finalize(&mut self) {
        let finite: Vec<f64> = self.rows.iter().filter_map(|r| r.psnr).collect();
        self.infinite_psnr_count = self.rows.len() - finite.len();
        self.mean_psnr = if finite.is_empty() {
            None
        } else {
            Some(finite.iter().sum::<f64>() / finite.len() as f64)
        };
        self.mean_ssim = if self.rows.is_empty() {
            None
        } else {
            Some(self.rows.iter().map(|r| r.ssim).sum::<f64>() / self.rows.len() as f64)
        };
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,mse,psnr_db,ssim\n");
        for r in &self.rows {
            let psnr = match r.psnr {
                Some(v) => format!("{v:.6}"),
                None => "inf".to_string(),
            };
            writeln!(out, "{},{:.6},{},{:.6}", r.id, r.mse, psnr, r.ssim).unwrap();
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        writeln!(out, "pairs evaluated: {}", self.rows.len()).unwrap();
        match self.mean_psnr {
            Some(v) => writeln!(out, "mean psnr: {v:.4} dB").unwrap(),
            None => writeln!(out, "mean psnr: n/a").unwrap(),
        }
        if self.infinite_psnr_count > 0 {
            writeln!(
                out,
                "note: {} identical pair(s) with infinite psnr excluded from the mean",
                self.infinite_psnr_count
            )
            .unwrap();
        }
        match self.mean_ssim {
            Some(v) => writeln!(out, "mean ssim: {v:.4}").unwrap(),
            None => writeln!(out, "mean ssim: n/a").unwrap(),
        }
        for e in &self.errors {
            writeln!(out, "error: {e}").unwrap();
        }
        out
    }
}

/// Pairs files by name across two directories, computes all metrics per
/// pair and aggregates. Unmatched or unreadable files land in the report's
/// error list and are excluded from the aggregates.
pub fn evaluate_dataset(pred_dir: &Path, ref_dir: &Path, p: &SsimParams) -> Result<MetricReport> {
    let preds = list_pngs(pred_dir)?;
    let refs = list_pngs(ref_dir)?;
    let mut report = MetricReport::default();

    let mut names: Vec<&String> = preds.keys().chain(refs.keys()).collect();
    names.sort();
    names.dedup();

    for name in names {
        match (preds.get(name), refs.get(name)) {
            (Some(pp), Some(rp)) => {
                let result = (|| -> Result<MetricRow> {
                    let pred = io::load_png_gray(pp)?;
                    let reference = io::load_png_gray(rp)?;
                    Ok(MetricRow {
                        id: name.clone(),
                        mse: mse(&pred, &reference)?,
                        psnr: psnr(&pred, &reference)?,
                        ssim: ssim(&pred, &reference, p)?,
                    })
                })();
                match result {
                    Ok(row) => report.rows.push(row),
                    Err(e) => report.errors.push(format!("{name}: {e}")),
                }
            }
            (Some(_), None) => report
                .errors
                .push(format!("{name}: missing reference counterpart")),
            (None, Some(_)) => report
                .errors
                .push(format!("{name}: missing prediction counterpart")),
            (None, None) => unreachable!(),
        }
    }
    report.finalize();
    Ok(report)
}

fn list_pngs(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                out.insert(name.to_string(), path);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pair(seed: u64, w: usize, h: usize) -> (Image, Image) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..w * h).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..w * h).map(|_| rng.random::<f64>()).collect();
        (
            Image::new(w, h, 1, a).unwrap(),
            Image::new(w, h, 1, b).unwrap(),
        )
    }

    // Flat-loop references, coded independently of the implementation path.
    fn mse_reference(x: &Image, y: &Image) -> f64 {
        let mut total = 0.0;
        for i in 0..x.data().len() {
            let d = 255.0 * (x.data()[i] - y.data()[i]);
            total += d * d;
        }
        total / x.data().len() as f64
    }

    fn ssim_global_reference(x: &Image, y: &Image, p: &SsimParams) -> f64 {
        let n = x.data().len() as f64;
        let xs: Vec<f64> = x.data().iter().map(|v| v * 255.0).collect();
        let ys: Vec<f64> = y.data().iter().map(|v| v * 255.0).collect();
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let vx = xs.iter().map(|v| (v - mx) * (v - mx)).sum::<f64>() / n;
        let vy = ys.iter().map(|v| (v - my) * (v - my)).sum::<f64>() / n;
        let cov = xs
            .iter()
            .zip(&ys)
            .map(|(a, b)| (a - mx) * (b - my))
            .sum::<f64>()
            / n;
        ((2.0 * mx * my + p.c1) * (2.0 * cov + p.c2))
            / ((mx * mx + my * my + p.c1) * (vx + vy + p.c2))
    }

    #[test]
    fn mse_basic_contracts() {
        let (x, _) = random_pair(1, 12, 12);
        assert_eq!(mse(&x, &x).unwrap(), 0.0);

        let shifted = Image::new(
            12,
            12,
            1,
            x.data().iter().map(|v| v + 10.0 / 255.0).collect(),
        )
        .unwrap();
        let m = mse(&x, &shifted).unwrap();
        assert!((m - 100.0).abs() < 1e-9, "constant offset mse {m}");
    }

    #[test]
    fn mse_matches_flat_loop() {
        let (x, y) = random_pair(2, 16, 16);
        let a = mse(&x, &y).unwrap();
        let b = mse_reference(&x, &y);
        assert!((a - b).abs() <= 1e-6 * b.abs());
    }

    #[test]
    fn mse_scale_law() {
        let (x, _) = random_pair(3, 10, 10);
        let offset = |k: f64| {
            Image::new(10, 10, 1, x.data().iter().map(|v| v + k * 0.01).collect()).unwrap()
        };
        let m1 = mse(&x, &offset(1.0)).unwrap();
        let m3 = mse(&x, &offset(3.0)).unwrap();
        assert!((m3 / m1 - 9.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_constant_offset_value() {
        let (x, _) = random_pair(4, 16, 16);
        let shifted = Image::new(
            16,
            16,
            1,
            x.data().iter().map(|v| v + 10.0 / 255.0).collect(),
        )
        .unwrap();
        let p = psnr(&x, &shifted).unwrap().unwrap();
        let expected = 10.0 * 650.25f64.log10();
        assert!((p - expected).abs() < 0.01, "psnr {p} vs {expected}");
        assert!((p - 28.13).abs() < 0.01);
    }

    #[test]
    fn psnr_identical_is_sentinel() {
        let (x, _) = random_pair(5, 8, 8);
        assert!(psnr(&x, &x).unwrap().is_none());
    }

    #[test]
    fn psnr_monotone_in_perturbation() {
        let (x, _) = random_pair(6, 12, 12);
        let mut last = f64::INFINITY;
        for k in 1..=5 {
            let shifted = Image::new(
                12,
                12,
                1,
                x.data().iter().map(|v| v + k as f64 * 0.01).collect(),
            )
            .unwrap();
            let p = psnr(&x, &shifted).unwrap().unwrap();
            assert!(p < last, "psnr must fall as mse grows");
            last = p;
        }
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let (x, y) = random_pair(7, 16, 16);
        let p = SsimParams::default();
        assert!((ssim(&x, &x, &p).unwrap() - 1.0).abs() < 1e-12);
        let ab = ssim(&x, &y, &p).unwrap();
        let ba = ssim(&y, &x, &p).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab < 1.0);

        let wp = SsimParams {
            mode: SsimMode::Windowed,
            ..p
        };
        assert!((ssim(&x, &x, &wp).unwrap() - 1.0).abs() < 1e-12);
        let wab = ssim(&x, &y, &wp).unwrap();
        let wba = ssim(&y, &x, &wp).unwrap();
        assert!((wab - wba).abs() < 1e-12);
    }

    #[test]
    fn ssim_inverted_image_scores_below_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<f64> = (0..16 * 16).map(|_| rng.random::<f64>()).collect();
        let x = Image::new(16, 16, 1, data.clone()).unwrap();
        let inv = Image::new(16, 16, 1, data.iter().map(|v| 1.0 - v).collect()).unwrap();
        let s = ssim(&x, &inv, &SsimParams::default()).unwrap();
        assert!(s < 1.0);
    }

    #[test]
    fn ssim_global_matches_reference() {
        let p = SsimParams::default();
        for seed in 0..5 {
            let (x, y) = random_pair(100 + seed, 16, 16);
            let a = ssim(&x, &y, &p).unwrap();
            let b = ssim_global_reference(&x, &y, &p);
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn ssim_at_most_one() {
        let p = SsimParams::default();
        for seed in 0..20 {
            let (x, y) = random_pair(200 + seed, 12, 12);
            assert!(ssim(&x, &y, &p).unwrap() <= 1.0);
        }
    }

    #[test]
    fn evaluate_dataset_contract() {
        let dir = std::env::temp_dir().join("fundus2ffa_metrics_test");
        let pred = dir.join("pred");
        let refs = dir.join("ref");
        std::fs::create_dir_all(&pred).unwrap();
        std::fs::create_dir_all(&refs).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for i in 0..3 {
            let data: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
            let img = Image::new(8, 8, 1, data).unwrap();
            io::save_png(&pred.join(format!("im{i}.png")), &img).unwrap();
            io::save_png(&refs.join(format!("im{i}.png")), &img).unwrap();
        }
        // One orphan on each side.
        io::save_png(&pred.join("only_pred.png"), &Image::zeros(8, 8, 1)).unwrap();
        io::save_png(&refs.join("only_ref.png"), &Image::zeros(8, 8, 1)).unwrap();

        let report = evaluate_dataset(&pred, &refs, &SsimParams::default()).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert_eq!(report.errors.len(), 2);
        assert_eq!(report.infinite_psnr_count, 3);
        assert!(report.mean_psnr.is_none());
        assert!((report.mean_ssim.unwrap() - 1.0).abs() < 1e-12);

        // Recomputing the aggregate from the rows reproduces it exactly.
        let mean: f64 =
            report.rows.iter().map(|r| r.ssim).sum::<f64>() / report.rows.len() as f64;
        assert_eq!(mean, report.mean_ssim.unwrap());
        std::fs::remove_dir_all(&dir).ok();
    }
}
