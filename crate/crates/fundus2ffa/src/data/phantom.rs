//! Synthetic phantom pairs: a seeded random vessel tree drawn dark-on-light
//! in the 3-channel structure image and bright-on-dark in the 1-channel
//! angiography, plus (with probability 1/2) a bright Gaussian blob added to
//! the angiography alone — leakage that the structure image cannot show.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{AlignedPair, Category};
use crate::error::{Error, Result};
use crate::raster::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub sigma: f64,
    pub amplitude: f64,
}

/// Geometry behind one phantom pair: the vesselness field in `[0,1]` and
/// the optional leakage blob.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomLayout {
    pub size: usize,
    pub vesselness: Vec<f64>,
    pub blob: Option<Blob>,
}

const ANGIO_BG: f64 = 0.08;
const ANGIO_VESSEL_GAIN: f64 = 0.75;
const STRUCT_BG: [f64; 3] = [0.82, 0.58, 0.45];
const STRUCT_VESSEL_DARK: [f64; 3] = [0.52, 0.38, 0.30];
/// Blob support is truncated at this many sigmas so the leakage has a
/// compact footprint.
const BLOB_SUPPORT_SIGMAS: f64 = 3.0;

impl PhantomLayout {
    pub fn render_structure(&self) -> Image {
        let n = self.size;
        let mut data = Vec::with_capacity(n * n * 3);
        for &v in &self.vesselness {
            for c in 0..3 {
                data.push((STRUCT_BG[c] - STRUCT_VESSEL_DARK[c] * v).clamp(0.0, 1.0));
            }
        }
        Image::new(n, n, 3, data).expect("finite by construction")
    }

    pub fn render_angiography(&self, with_blob: bool) -> Image {
        let n = self.size;
        let mut data: Vec<f64> = self
            .vesselness
            .iter()
            .map(|&v| (ANGIO_BG + ANGIO_VESSEL_GAIN * v).clamp(0.0, 1.0))
            .collect();
        if with_blob {
            if let Some(blob) = &self.blob {
                let support = BLOB_SUPPORT_SIGMAS * blob.sigma;
                for y in 0..n {
                    for x in 0..n {
                        let dx = x as f64 - blob.cx;
                        let dy = y as f64 - blob.cy;
                        let d2 = dx * dx + dy * dy;
                        if d2 <= support * support {
                            let g = blob.amplitude
                                * (-d2 / (2.0 * blob.sigma * blob.sigma)).exp();
                            data[y * n + x] = (data[y * n + x] + g).min(1.0);
                        }
                    }
                }
            }
        }
        Image::new(n, n, 1, data).expect("finite by construction")
    }

    pub fn to_pair(&self, source_id: String) -> AlignedPair {
        AlignedPair {
            structure: self.render_structure(),
            angiography: self.render_angiography(true),
            category: Category::Synthetic,
            source_id,
        }
    }
}

/// Seeded phantom pairs; identical (n, size, seed) reproduce bit-identical
/// images.
pub fn synth_phantom_pairs(n: usize, size: usize, seed: u64) -> Result<Vec<AlignedPair>> {
    Ok(synth_phantom_detailed(n, size, seed)?
        .into_iter()
        .map(|(pair, _)| pair)
        .collect())
}

/// As [`synth_phantom_pairs`] but keeps the generating geometry alongside
/// each pair, for tests and diagnostics.
pub fn synth_phantom_detailed(
    n: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<(AlignedPair, PhantomLayout)>> {
    if n < 1 {
        return Err(Error::Parameter("phantom count must be >= 1".into()));
    }
    if size < 64 {
        return Err(Error::Parameter(format!(
            "phantom size must be >= 64, got {size}"
        )));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let pair_seed = seed
            .wrapping_mul(0x9e3779b97f4a7c15)
            .wrapping_add(i as u64 + 1);
        let layout = generate_layout(size, pair_seed);
        let pair = layout.to_pair(format!("phantom_{i:03}"));
        out.push((pair, layout));
    }
    Ok(out)
}

fn generate_layout(size: usize, seed: u64) -> PhantomLayout {
    // Separate streams so blob sampling never perturbs the vessel tree.
    let mut vessel_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blob_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5851f42d4c957f2d);

    let mut vesselness = vec![0.0f64; size * size];
    let n_vessels = vessel_rng.random_range(3..=4);
    let mut trunk_points: Vec<(f64, f64)> = Vec::new();
    for _ in 0..n_vessels {
        let points = draw_walk(&mut vesselness, size, &mut vessel_rng, None);
        trunk_points.extend(points.into_iter().step_by(8));
    }
    // A couple of thinner branches off recorded trunk positions.
    let n_branches = vessel_rng.random_range(1..=2);
    for _ in 0..n_branches {
        if trunk_points.is_empty() {
            break;
        }
        let at = trunk_points[vessel_rng.random_range(0..trunk_points.len())];
        draw_walk(&mut vesselness, size, &mut vessel_rng, Some(at));
    }

    let blob = if blob_rng.random::<f64>() < 0.5 {
        let margin = size as f64 * 0.25;
        Some(Blob {
            cx: blob_rng.random_range(margin..size as f64 - margin),
            cy: blob_rng.random_range(margin..size as f64 - margin),
            sigma: blob_rng.random_range(5.0..15.0),
            amplitude: blob_rng.random_range(0.5..0.7),
        })
    } else {
        None
    };

    PhantomLayout {
        size,
        vesselness,
        blob,
    }
}

// Random-walk polyline stamped as antialiased disks; returns the visited
// centers. Branches start thinner.
fn draw_walk(
    field: &mut [f64],
    size: usize,
    rng: &mut ChaCha8Rng,
    start: Option<(f64, f64)>,
) -> Vec<(f64, f64)> {
    let s = size as f64;
    let (mut x, mut y, width) = match start {
        Some((sx, sy)) => (sx, sy, rng.random_range(1..=2) as f64),
        None => {
            // Enter from a random border heading inward.
            let (x, y) = match rng.random_range(0..4) {
                0 => (rng.random_range(0.1..0.9) * s, 1.0),
                1 => (rng.random_range(0.1..0.9) * s, s - 2.0),
                2 => (1.0, rng.random_range(0.1..0.9) * s),
                _ => (s - 2.0, rng.random_range(0.1..0.9) * s),
            };
            (x, y, rng.random_range(1..=4) as f64)
        }
    };
    let mut heading = (rng.random::<f64>() * 2.0 - 1.0) * std::f64::consts::PI;
    // Start by pointing at the center so walks cross the image.
    let to_center = ((s / 2.0 - y).atan2(s / 2.0 - x) + heading * 0.2) % std::f64::consts::TAU;
    heading = to_center;
    let turn = Normal::new(0.0, 0.18).unwrap();
    let steps = (s * rng.random_range(0.7..1.1)) as usize;
    let radius = width / 2.0;
    let mut points = Vec::with_capacity(steps);
    for _ in 0..steps {
        stamp_disk(field, size, x, y, radius);
        points.push((x, y));
        heading += turn.sample(rng);
        x += heading.cos();
        y += heading.sin();
        if x < 1.0 || x > s - 2.0 || y < 1.0 || y > s - 2.0 {
            break;
        }
    }
    points
}

fn stamp_disk(field: &mut [f64], size: usize, cx: f64, cy: f64, radius: f64) {
    let r_out = radius + 1.0;
    let x0 = (cx - r_out).floor().max(0.0) as usize;
    let x1 = ((cx + r_out).ceil() as usize).min(size - 1);
    let y0 = (cy - r_out).floor().max(0.0) as usize;
    let y1 = ((cy + r_out).ceil() as usize).min(size - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let d = (dx * dx + dy * dy).sqrt();
            // Soft 1-px falloff at the rim.
            let v = (radius + 0.5 - d).clamp(0.0, 1.0);
            let cell = &mut field[y * size + x];
            if v > *cell {
                *cell = v;
            }
        }
    }
}
