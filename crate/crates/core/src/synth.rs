//! Deterministic synthetic chest-CT phantoms.
//!
//! Each phantom has a body ellipse (+40 HU), two ellipsoidal lungs (~-850 HU)
//! and an infection region grown inside the lungs to a requested fraction of
//! the lung volume. COVID phantoms get several peripheral lesions with fine
//! texture at -700..-500 HU; CAP phantoms get one central lesion with smooth
//! texture at -300..-100 HU.

use std::fs;
use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{infection_ratio, ClassLabel, Manifest, ScanRecord};
use crate::error::{Error, Result};
use crate::volume::{write_mask_nifti, write_nifti, Volume};
use crate::volume_prep::TARGET_SPACING;

const BODY_HU: f32 = 40.0;
const AIR_HU: f32 = -1000.0;
const LUNG_HU: f32 = -850.0;

const LUNG_CENTRES: [[f64; 3]; 2] = [[0.5, 0.48, 0.30], [0.5, 0.48, 0.70]];
const LUNG_RADII: [f64; 3] = [0.42, 0.32, 0.17];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub class_label: ClassLabel,
    pub target_ratio: f64,
    pub texture_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    /// Intensities in HU.
    pub volume: Volume,
    pub lung_mask: Volume,
    pub infection_mask: Volume,
}

/// Mixes a base seed with an index (splitmix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Normalized ellipsoidal radius of a voxel in its lung (< 1 inside), and which lung.
fn lung_radius(shape: [usize; 3], z: usize, y: usize, x: usize) -> (f64, usize) {
    let p = [
        (z as f64 + 0.5) / shape[0] as f64,
        (y as f64 + 0.5) / shape[1] as f64,
        (x as f64 + 0.5) / shape[2] as f64,
    ];
    LUNG_CENTRES
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let r2: f64 = (0..3).map(|a| ((p[a] - c[a]) / LUNG_RADII[a]).powi(2)).sum();
            (r2.sqrt(), i)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .expect("two lungs")
}

/// Mean normalized lung radius over the positive voxels of `mask`
/// (0 = lung centre, 1 = pleural surface).
pub fn mean_peripherality(mask: &Volume) -> Option<f64> {
    let shape = mask.shape();
    let (mut sum, mut n) = (0.0, 0usize);
    for ((z, y, x), v) in mask.data.indexed_iter() {
        if *v > 0.5 {
            sum += lung_radius(shape, z, y, x).0;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    if spec.shape.iter().any(|d| *d < 16) {
        return Err(Error::invalid(format!("phantom dims must be >= 16, got {:?}", spec.shape)));
    }
    if !(0.0..0.9).contains(&spec.target_ratio) {
        return Err(Error::invalid(format!("target ratio must be in [0, 0.9), got {}", spec.target_ratio)));
    }
    let shape = spec.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.texture_seed);

    let mut volume = Array3::<f32>::from_elem(shape, AIR_HU);
    let mut lung = Array3::<f32>::zeros(shape);
    let mut radius = Array3::<f64>::zeros(shape);
    let mut lung_voxels = Vec::new();
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let v = (y as f64 + 0.5) / shape[1] as f64;
                let w = (x as f64 + 0.5) / shape[2] as f64;
                let body = ((v - 0.5) / 0.45).powi(2) + ((w - 0.5) / 0.48).powi(2) <= 1.0;
                let noise: f32 = rng.gen_range(-15.0..15.0);
                if body {
                    volume[[z, y, x]] = BODY_HU + noise;
                }
                let (r, _) = lung_radius(shape, z, y, x);
                radius[[z, y, x]] = r;
                if r <= 1.0 && body {
                    lung[[z, y, x]] = 1.0;
                    volume[[z, y, x]] = LUNG_HU + noise;
                    lung_voxels.push([z, y, x]);
                }
            }
        }
    }
    if lung_voxels.is_empty() {
        return Err(Error::EmptyLung);
    }

    let target_count = (spec.target_ratio * lung_voxels.len() as f64).round() as usize;
    if spec.target_ratio > 0.0 && target_count == 0 {
        return Err(Error::invalid(format!(
            "target ratio {} is infeasible for a lung of {} voxels",
            spec.target_ratio,
            lung_voxels.len()
        )));
    }

    let mut infection = Array3::<f32>::zeros(shape);
    if target_count > 0 {
        let (band, n_seeds, hu_range) = match spec.class_label {
            ClassLabel::Covid => ((0.72, 0.95), rng.gen_range(3..=6), (-700.0f32, -500.0f32)),
            ClassLabel::Cap => ((0.0, 0.3), 1, (-300.0, -100.0)),
        };
        let candidates: Vec<[usize; 3]> = lung_voxels
            .iter()
            .copied()
            .filter(|p| (band.0..=band.1).contains(&radius[*p]))
            .collect();
        let pool = if candidates.is_empty() { &lung_voxels } else { &candidates };
        let seeds: Vec<([usize; 3], f32)> = (0..n_seeds)
            .map(|_| (pool[rng.gen_range(0..pool.len())], rng.gen_range(hu_range.0..hu_range.1)))
            .collect();

        // Grow all lesions together: rank lung voxels by (jittered) physical
        // distance to the nearest seed and keep the closest `target_count`.
        let mut ranked: Vec<(f64, usize, usize)> = lung_voxels
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let (d, owner) = seeds
                    .iter()
                    .enumerate()
                    .map(|(k, (s, _))| {
                        let d2: f64 = (0..3)
                            .map(|a| ((p[a] as f64 - s[a] as f64) * spec.spacing[a]).powi(2))
                            .sum();
                        (d2.sqrt(), k)
                    })
                    .min_by(|a, b| a.0.total_cmp(&b.0))
                    .expect("at least one seed");
                let jitter: f64 = rng.gen_range(0.85..1.15);
                (d * jitter, i, owner)
            })
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        for &(_, i, owner) in ranked.iter().take(target_count) {
            let p = lung_voxels[i];
            let base = seeds[owner].1;
            let texture = match spec.class_label {
                ClassLabel::Covid => rng.gen_range(-50.0f32..50.0),
                ClassLabel::Cap => {
                    let t = |k: usize, n: f64| (2.0 * std::f64::consts::PI * p[k] as f64 / n).sin();
                    (40.0 * t(0, 14.0) * t(1, 18.0) * t(2, 18.0)) as f32
                }
            };
            infection[p] = 1.0;
            volume[p] = base + texture;
        }
    }

    Ok(Phantom {
        volume: Volume::new(volume, spec.spacing)?,
        lung_mask: Volume::new(lung, spec.spacing)?,
        infection_mask: Volume::new(infection, spec.spacing)?,
    })
}

/// Mixture of log-uniform bands `(weight, low, high)` per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioLaw {
    pub covid: Vec<(f64, f64, f64)>,
    pub cap: Vec<(f64, f64, f64)>,
}

impl Default for RatioLaw {
    /// COVID skewed towards large infections and CAP towards tiny ones, with
    /// both minority groups (small COVID, large CAP) near 40% of their class.
    fn default() -> Self {
        RatioLaw {
            covid: vec![(0.2, 0.001, 0.005), (0.2, 0.005, 0.03), (0.6, 0.03, 0.25)],
            cap: vec![(0.6, 0.0003, 0.001), (0.25, 0.001, 0.005), (0.15, 0.005, 0.03)],
        }
    }
}

impl RatioLaw {
    pub fn sample(&self, label: ClassLabel, rng: &mut impl Rng) -> f64 {
        let bands = match label {
            ClassLabel::Covid => &self.covid,
            ClassLabel::Cap => &self.cap,
        };
        let total: f64 = bands.iter().map(|b| b.0).sum();
        let mut u = rng.gen_range(0.0..total);
        for &(w, lo, hi) in bands {
            if u < w {
                return (lo.ln() + rng.gen_range(0.0..1.0) * (hi.ln() - lo.ln())).exp();
            }
            u -= w;
        }
        let &(_, lo, _) = bands.last().expect("non-empty ratio law");
        lo
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_covid: usize,
    pub n_cap: usize,
    pub ratio_law: RatioLaw,
    pub seed: u64,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
}

impl DatasetSpec {
    pub fn new(n_covid: usize, n_cap: usize, seed: u64) -> Self {
        DatasetSpec {
            n_covid,
            n_cap,
            ratio_law: RatioLaw::default(),
            seed,
            shape: [32, 48, 48],
            spacing: TARGET_SPACING,
        }
    }

    /// Phantom specs in manifest order (COVID first).
    pub fn phantom_specs(&self) -> Vec<PhantomSpec> {
        (0..self.n_covid + self.n_cap)
            .map(|i| {
                let label = if i < self.n_covid { ClassLabel::Covid } else { ClassLabel::Cap };
                let phantom_seed = derive_seed(self.seed, i as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(phantom_seed);
                PhantomSpec {
                    shape: self.shape,
                    spacing: self.spacing,
                    class_label: label,
                    target_ratio: self.ratio_law.sample(label, &mut rng),
                    texture_seed: rng.gen(),
                }
            })
            .collect()
    }
}

/// Writes NIfTI triplets and `manifest.jsonl` into `out_dir`.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<Manifest> {
    if spec.n_covid + spec.n_cap == 0 {
        return Err(Error::EmptyManifest);
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::new();
    for (i, pspec) in spec.phantom_specs().iter().enumerate() {
        let phantom = generate_phantom(pspec)?;
        let scan_id = format!("phantom_{i:04}");
        let names = [
            format!("{scan_id}_ct.nii"),
            format!("{scan_id}_lung.nii"),
            format!("{scan_id}_infection.nii"),
        ];
        write_nifti(&out_dir.join(&names[0]), &phantom.volume)?;
        write_mask_nifti(&out_dir.join(&names[1]), &phantom.lung_mask)?;
        write_mask_nifti(&out_dir.join(&names[2]), &phantom.infection_mask)?;
        let ratio = infection_ratio(&phantom.infection_mask, &phantom.lung_mask)?;
        let [ct, lung, inf] = names;
        records.push(ScanRecord {
            scan_id,
            patient_id: format!("patient_{i:04}"),
            class_label: pspec.class_label,
            volume_path: ct.into(),
            lung_mask_path: lung.into(),
            infection_mask_path: inf.into(),
            infection_ratio: Some(ratio),
        });
    }
    let manifest = Manifest::new(records, "all", out_dir)?;
    crate::data_model::write_manifest(&out_dir.join("manifest.jsonl"), &manifest)?;
    Ok(manifest)
}
