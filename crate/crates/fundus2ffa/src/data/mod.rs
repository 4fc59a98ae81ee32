//! Paired-dataset plumbing: ingestion of pre-aligned retinography /
//! angiography trees, preprocessing (co-located patch extraction with
//! optional circular ROI masking), the per-category train/test split, and
//! synthetic phantom pairs for desk-scale runs.
//!
//! Inputs must already be registered; alignment is someone else's job.

pub mod phantom;

pub use phantom::{synth_phantom_detailed, synth_phantom_pairs, PhantomLayout};

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::raster::{self, io, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Normal,
    OpticDiscLeakage,
    LargeFocalLeakage,
    PunctateFocalLeakage,
    Synthetic,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Normal,
        Category::OpticDiscLeakage,
        Category::LargeFocalLeakage,
        Category::PunctateFocalLeakage,
        Category::Synthetic,
    ];

    pub fn dir_name(&self) -> &'static str {
        match self {
            Category::Normal => "normal",
            Category::OpticDiscLeakage => "optic-disc-leakage",
            Category::LargeFocalLeakage => "large-focal-leakage",
            Category::PunctateFocalLeakage => "punctate-focal-leakage",
            Category::Synthetic => "synthetic",
        }
    }

    pub fn from_dir_name(name: &str) -> Option<Category> {
        Category::ALL.iter().copied().find(|c| c.dir_name() == name)
    }
}

/// A registered structure/angiography pair sharing width and height.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPair {
    pub structure: Image,
    pub angiography: Image,
    pub category: Category,
    pub source_id: String,
}

impl AlignedPair {
    pub fn new(
        structure: Image,
        angiography: Image,
        category: Category,
        source_id: String,
    ) -> Result<AlignedPair> {
        if structure.width() != angiography.width() || structure.height() != angiography.height() {
            return Err(Error::Data(format!(
                "pair {source_id}: structure {}x{} vs angiography {}x{}",
                structure.width(),
                structure.height(),
                angiography.width(),
                angiography.height()
            )));
        }
        Ok(AlignedPair {
            structure,
            angiography,
            category,
            source_id,
        })
    }
}

#[derive(Debug, Default)]
pub struct IngestReport {
    pub pairs: Vec<AlignedPair>,
    pub warnings: Vec<String>,
}

pub const STRUCT_SUFFIX: &str = "_struct.png";
pub const FFA_SUFFIX: &str = "_ffa.png";

/// Loads every `<category>/<id>_struct.png` + `<id>_ffa.png` pair under
/// `root` in deterministic lexicographic order. Orphans and shape-mismatched
/// pairs are skipped with a warning.
pub fn ingest_pairs(root: &Path) -> Result<IngestReport> {
    ingest_pairs_with_exclusions(root, &BTreeSet::new())
}

/// As [`ingest_pairs`], additionally skipping any source id on the
/// exclusion list.
pub fn ingest_pairs_with_exclusions(
    root: &Path,
    exclusions: &BTreeSet<String>,
) -> Result<IngestReport> {
    let mut report = IngestReport::default();
    let mut cat_dirs: Vec<(Category, std::path::PathBuf)> = Vec::new();
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut unknown = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if !entry.path().is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        match Category::from_dir_name(&name) {
            Some(cat) => cat_dirs.push((cat, entry.path())),
            None => unknown.push(name),
        }
    }
    unknown.sort();
    for name in unknown {
        report
            .warnings
            .push(format!("ignoring unknown category directory {name:?}"));
    }
    cat_dirs.sort_by_key(|(c, _)| *c);

    for (category, dir) in cat_dirs {
        let mut names: Vec<String> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        let name_set: BTreeSet<&str> = names.iter().map(|s| s.as_str()).collect();
        for name in &names {
            if let Some(id) = name.strip_suffix(STRUCT_SUFFIX) {
                if exclusions.contains(id) {
                    report
                        .warnings
                        .push(format!("{}/{id}: excluded by list", category.dir_name()));
                    continue;
                }
                let ffa_name = format!("{id}{FFA_SUFFIX}");
                if !name_set.contains(ffa_name.as_str()) {
                    report.warnings.push(format!(
                        "{}/{id}: missing angiography counterpart, skipped",
                        category.dir_name()
                    ));
                    continue;
                }
                let structure = io::load_png_rgb(&dir.join(name));
                let angiography = io::load_png_gray(&dir.join(&ffa_name));
                match (structure, angiography) {
                    (Ok(s), Ok(a)) => {
                        match AlignedPair::new(s, a, category, id.to_string()) {
                            Ok(pair) => report.pairs.push(pair),
                            Err(e) => report.warnings.push(format!("rejected: {e}")),
                        }
                    }
                    (Err(e), _) | (_, Err(e)) => {
                        report.warnings.push(format!(
                            "{}/{id}: unreadable, skipped ({e})",
                            category.dir_name()
                        ));
                    }
                }
            } else if name.ends_with(FFA_SUFFIX) {
                let id = name.strip_suffix(FFA_SUFFIX).unwrap();
                if !exclusions.contains(id)
                    && !name_set.contains(format!("{id}{STRUCT_SUFFIX}").as_str())
                {
                    report.warnings.push(format!(
                        "{}/{id}: missing structure counterpart, skipped",
                        category.dir_name()
                    ));
                }
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RoiMode {
    None,
    Circle,
}

/// Extracts co-located patches from both sides of a pair; with
/// `RoiMode::Circle` both patches are multiplied by the circular mask whose
/// diameter is the patch width.
pub fn preprocess_pair(
    pair: &AlignedPair,
    patch_w: usize,
    patch_h: usize,
    stride_x: usize,
    stride_y: usize,
    roi: RoiMode,
) -> Result<Vec<AlignedPair>> {
    let s_patches = raster::extract_patches_rect(&pair.structure, patch_w, patch_h, stride_x, stride_y)?;
    let a_patches =
        raster::extract_patches_rect(&pair.angiography, patch_w, patch_h, stride_x, stride_y)?;
    debug_assert_eq!(s_patches.len(), a_patches.len());
    let mask = match roi {
        RoiMode::None => None,
        RoiMode::Circle => Some(circle_mask_rect(patch_w, patch_h)),
    };
    let mut out = Vec::with_capacity(s_patches.len());
    for ((mut s, so), (mut a, ao)) in s_patches.into_iter().zip(a_patches) {
        debug_assert_eq!(so, ao);
        if let Some(mask) = &mask {
            s = raster::apply_mask(&s, mask)?;
            a = raster::apply_mask(&a, mask)?;
        }
        out.push(AlignedPair::new(
            s,
            a,
            pair.category,
            format!("{}_x{}_y{}", pair.source_id, so.0, so.1),
        )?);
    }
    Ok(out)
}

// Circle of diameter = patch width on a possibly non-square canvas.
fn circle_mask_rect(w: usize, h: usize) -> Image {
    if w == h {
        return raster::circular_roi_mask(w).expect("positive size");
    }
    let mut mask = Image::zeros(w, h, 1);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let r2 = (w as f64 / 2.0) * (w as f64 / 2.0);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            if dx * dx + dy * dy <= r2 {
                mask.set(x, y, 0, 1.0);
            }
        }
    }
    mask
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<AlignedPair>,
    pub test: Vec<AlignedPair>,
    pub seed: u64,
    pub train_ratio: f64,
}

/// Per-category seeded shuffle-and-split at the source-pair level, keeping
/// every source on exactly one side. Test size is the rounded test share of
/// each category; categories with fewer than two pairs go wholesale to
/// train with a warning.
pub fn split_dataset(
    pairs: Vec<AlignedPair>,
    train_ratio: f64,
    seed: u64,
) -> Result<(DatasetSplit, Vec<String>)> {
    if !(train_ratio > 0.0 && train_ratio < 1.0) {
        return Err(Error::Parameter(format!(
            "split ratio must be in (0,1), got {train_ratio}"
        )));
    }
    let mut warnings = Vec::new();
    let mut split = DatasetSplit {
        train: Vec::new(),
        test: Vec::new(),
        seed,
        train_ratio,
    };
    for (ci, category) in Category::ALL.iter().enumerate() {
        let bucket: Vec<AlignedPair> = pairs
            .iter()
            .filter(|p| p.category == *category)
            .cloned()
            .collect();
        if bucket.is_empty() {
            continue;
        }
        if bucket.len() < 2 {
            warnings.push(format!(
                "category {} has {} pair(s); assigning all to train",
                category.dir_name(),
                bucket.len()
            ));
            split.train.extend(bucket);
            continue;
        }
        let n = bucket.len();
        let test_count = ((n as f64) * (1.0 - train_ratio)).round() as usize;
        let mut indices: Vec<usize> = (0..n).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (ci as u64).wrapping_mul(0x9e3779b97f4a7c15));
        indices.shuffle(&mut rng);
        let mut bucket: Vec<Option<AlignedPair>> = bucket.into_iter().map(Some).collect();
        for (pos, &idx) in indices.iter().enumerate() {
            let pair = bucket[idx].take().unwrap();
            if pos < test_count {
                split.test.push(pair);
            } else {
                split.train.push(pair);
            }
        }
    }
    Ok((split, warnings))
}
