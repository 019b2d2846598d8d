//! CT preprocessing: spacing resampling, window/level normalization, lung
//! masking, uniform downscaling, and centred zero-padding to a fixed grid.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3, Ix3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_model::{infection_ratio, ClassLabel, Manifest, ScanRecord};
use crate::error::{Error, Result};
use crate::interp::{resample_axes, AxisTaps};
use crate::volume::{read_nifti, write_mask_nifti, write_nifti, Volume};

/// Target voxel size (z, y, x) in millimetres.
pub const TARGET_SPACING: [f64; 3] = [1.25, 0.7168, 0.7168];
pub const CANONICAL_SHAPE: [usize; 3] = [138, 256, 256];
pub const WINDOW_MIN_HU: f32 = -1350.0;
pub const WINDOW_MAX_HU: f32 = 150.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

fn taps(mode: Interpolation, in_len: usize, out_len: usize, step: f64) -> AxisTaps {
    match mode {
        Interpolation::Trilinear => AxisTaps::linear(in_len, out_len, step),
        Interpolation::Nearest => AxisTaps::nearest(in_len, out_len, step),
    }
}

fn scale_grid(data: &Array3<f32>, out: [usize; 3], steps: [f64; 3], mode: Interpolation) -> Array3<f32> {
    let shape = data.shape().to_vec();
    let t: Vec<AxisTaps> = (0..3).map(|a| taps(mode, shape[a], out[a], steps[a])).collect();
    let dyn_out = resample_axes(data.view().into_dyn(), &[(0, &t[0]), (1, &t[1]), (2, &t[2])]);
    dyn_out.into_dimensionality::<Ix3>().expect("3D in, 3D out")
}

/// Resamples `v` to `target_spacing`; output dims are
/// `round(dim * spacing / target_spacing)` per axis.
pub fn resample(v: &Volume, target_spacing: [f64; 3], mode: Interpolation) -> Result<Volume> {
    if target_spacing.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::invalid(format!("target spacing must be positive, got {target_spacing:?}")));
    }
    let shape = v.shape();
    let mut out = [0usize; 3];
    let mut steps = [0f64; 3];
    for a in 0..3 {
        out[a] = ((shape[a] as f64 * v.spacing[a] / target_spacing[a]).round() as usize).max(1);
        steps[a] = target_spacing[a] / v.spacing[a];
    }
    Volume::new(scale_grid(&v.data, out, steps, mode), target_spacing)
}

/// Clamps to the [-1350, 150] HU window and maps it linearly onto [0, 1].
pub fn window_normalize(v: &Volume) -> Volume {
    let width = WINDOW_MAX_HU - WINDOW_MIN_HU;
    Volume {
        data: v.data.mapv(|x| (x.clamp(WINDOW_MIN_HU, WINDOW_MAX_HU) - WINDOW_MIN_HU) / width),
        spacing: v.spacing,
    }
}

pub fn apply_lung_mask(v_norm: &Volume, lung_mask: &Volume) -> Result<Volume> {
    if v_norm.shape() != lung_mask.shape() {
        return Err(Error::ShapeMismatch(format!(
            "image {:?} vs lung mask {:?}",
            v_norm.shape(),
            lung_mask.shape()
        )));
    }
    Ok(Volume {
        data: &v_norm.data * &lung_mask.data,
        spacing: v_norm.spacing,
    })
}

/// Single scale factor `min(target/dim..., 1)` for all axes.
pub fn downscale_factor(shape: [usize; 3], target: [usize; 3]) -> f64 {
    (0..3)
        .map(|a| target[a] as f64 / shape[a] as f64)
        .fold(1.0, f64::min)
}

/// Content dims after scaling by `s` (before padding).
pub fn scaled_dims(shape: [usize; 3], s: f64) -> [usize; 3] {
    shape.map(|d| ((d as f64 * s).round() as usize).max(1))
}

/// Shrinks `v` uniformly so it fits `target`, then centres it in a zero grid
/// of exactly `target` (odd padding puts the extra voxel after the content).
pub fn downscale_pad(v: &Volume, target: [usize; 3], mode: Interpolation) -> Volume {
    let shape = v.shape();
    let s = downscale_factor(shape, target);
    let content = scaled_dims(shape, s);
    let scaled = if content == shape {
        v.data.clone()
    } else {
        scale_grid(&v.data, content, [1.0 / s; 3], mode)
    };
    let mut out = Array3::<f32>::zeros(target);
    let off: Vec<usize> = (0..3).map(|a| (target[a] - content[a]) / 2).collect();
    out.slice_mut(s![
        off[0]..off[0] + content[0],
        off[1]..off[1] + content[1],
        off[2]..off[2] + content[2]
    ])
    .assign(&scaled);
    Volume {
        data: out,
        spacing: v.spacing.map(|sp| sp / s),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrepParams {
    pub target_spacing: [f64; 3],
    pub target_shape: [usize; 3],
}

impl Default for PrepParams {
    fn default() -> Self {
        PrepParams {
            target_spacing: TARGET_SPACING,
            target_shape: CANONICAL_SHAPE,
        }
    }
}

impl PrepParams {
    pub fn with_shape(target_shape: [usize; 3]) -> Self {
        PrepParams {
            target_shape,
            ..Self::default()
        }
    }

    /// Short stable digest used to key on-disk caches.
    pub fn cache_key(&self) -> String {
        let json = serde_json::to_string(self).expect("plain data");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedSample {
    pub scan_id: String,
    pub image: Volume,
    pub infection_mask: Volume,
    pub label: ClassLabel,
    pub ratio: f64,
}

/// The pure pipeline on in-memory volumes. Returns (image, infection mask, ratio).
pub fn preprocess_volumes(
    image: &Volume,
    lung: &Volume,
    infection: &Volume,
    params: &PrepParams,
) -> Result<(Volume, Volume, f64)> {
    if image.shape() != lung.shape() || image.shape() != infection.shape() {
        return Err(Error::ShapeMismatch(format!(
            "image {:?}, lung {:?}, infection {:?}",
            image.shape(),
            lung.shape(),
            infection.shape()
        )));
    }
    let image_r = resample(image, params.target_spacing, Interpolation::Trilinear)?;
    let lung_r = resample(lung, params.target_spacing, Interpolation::Nearest)?;
    let inf_r = resample(infection, params.target_spacing, Interpolation::Nearest)?;
    let ratio = infection_ratio(&inf_r, &lung_r)?;

    let masked = apply_lung_mask(&window_normalize(&image_r), &lung_r)?;
    let image_out = downscale_pad(&masked, params.target_shape, Interpolation::Trilinear);
    // The mask is rescaled separately; trilinear blending at the lung border
    // would otherwise leak nonzero values outside the downscaled lung.
    let lung_out = downscale_pad(&lung_r, params.target_shape, Interpolation::Nearest);
    let image_out = apply_lung_mask(&image_out, &lung_out)?;
    let inf_out = downscale_pad(&inf_r, params.target_shape, Interpolation::Nearest);
    Ok((image_out, inf_out, ratio))
}

/// Reads the three files of `record` and runs the full pipeline.
pub fn preprocess(manifest: &Manifest, record: &ScanRecord, params: &PrepParams) -> Result<PreprocessedSample> {
    let image = read_nifti(&manifest.resolve(&record.volume_path))?;
    let lung = read_nifti(&manifest.resolve(&record.lung_mask_path))?;
    let infection = read_nifti(&manifest.resolve(&record.infection_mask_path))?;
    let (image, infection_mask, ratio) = preprocess_volumes(&image, &lung, &infection, params)?;
    Ok(PreprocessedSample {
        scan_id: record.scan_id.clone(),
        image,
        infection_mask,
        label: record.class_label,
        ratio,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    label: ClassLabel,
    ratio: f64,
    source_scan_id: String,
}

fn cache_paths(dir: &Path, scan_id: &str, params: &PrepParams) -> (PathBuf, PathBuf, PathBuf) {
    let stem = format!("{scan_id}_{}", params.cache_key());
    (
        dir.join(format!("{stem}_image.nii")),
        dir.join(format!("{stem}_infection.nii")),
        dir.join(format!("{stem}.json")),
    )
}

pub fn save_cached(dir: &Path, sample: &PreprocessedSample, params: &PrepParams) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (img, inf, side) = cache_paths(dir, &sample.scan_id, params);
    write_nifti(&img, &sample.image)?;
    write_mask_nifti(&inf, &sample.infection_mask)?;
    let meta = Sidecar {
        label: sample.label,
        ratio: sample.ratio,
        source_scan_id: sample.scan_id.clone(),
    };
    fs::write(&side, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&side, e))
}

pub fn load_cached(dir: &Path, scan_id: &str, params: &PrepParams) -> Result<Option<PreprocessedSample>> {
    let (img, inf, side) = cache_paths(dir, scan_id, params);
    if !side.exists() {
        return Ok(None);
    }
    let text = fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let meta: Sidecar = serde_json::from_slice(&text)?;
    Ok(Some(PreprocessedSample {
        scan_id: meta.source_scan_id,
        image: read_nifti(&img)?,
        infection_mask: read_nifti(&inf)?,
        label: meta.label,
        ratio: meta.ratio,
    }))
}

/// Loads from `cache_dir` when a matching entry exists, otherwise preprocesses
/// and (if a cache dir is given) stores the result.
pub fn preprocess_cached(
    manifest: &Manifest,
    record: &ScanRecord,
    params: &PrepParams,
    cache_dir: Option<&Path>,
) -> Result<PreprocessedSample> {
    if let Some(dir) = cache_dir {
        if let Some(hit) = load_cached(dir, &record.scan_id, params)? {
            return Ok(hit);
        }
    }
    let sample = preprocess(manifest, record, params)?;
    if let Some(dir) = cache_dir {
        save_cached(dir, &sample, params)?;
    }
    Ok(sample)
}
