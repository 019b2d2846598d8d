//! Dataset manifest, scan records, infection ratios, and the two group
//! taxonomies (sampling groups for training, ratio bands for reporting).

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{read_nifti, Volume};

/// Upper bound (exclusive) of the infection ratio of a small-infection COVID scan.
pub const COVID_SMALL_BELOW: f64 = 0.030;
/// Lower bound (exclusive) of the infection ratio of a large-infection CAP scan.
pub const CAP_LARGE_ABOVE: f64 = 0.001;
pub const EVAL_LOW_BELOW: f64 = 0.005;
pub const EVAL_HIGH_ABOVE: f64 = 0.030;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    #[serde(rename = "COVID")]
    Covid,
    #[serde(rename = "CAP")]
    Cap,
}

impl ClassLabel {
    /// Binary target, 1 for COVID (the positive class).
    pub fn target(self) -> f64 {
        match self {
            ClassLabel::Covid => 1.0,
            ClassLabel::Cap => 0.0,
        }
    }

    pub fn is_positive(self) -> bool {
        self == ClassLabel::Covid
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassLabel::Covid => "COVID",
            ClassLabel::Cap => "CAP",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRecord {
    pub scan_id: String,
    pub patient_id: String,
    pub class_label: ClassLabel,
    pub volume_path: PathBuf,
    pub lung_mask_path: PathBuf,
    pub infection_mask_path: PathBuf,
    #[serde(default)]
    pub infection_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<ScanRecord>,
    pub split_tag: String,
    /// Directory that relative record paths are resolved against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(records: Vec<ScanRecord>, split_tag: impl Into<String>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyManifest);
        }
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.scan_id.as_str()) {
                return Err(Error::Validation(format!("duplicate scan_id `{}`", r.scan_id)));
            }
            if let Some(ratio) = r.infection_ratio {
                if !(ratio >= 0.0) || !ratio.is_finite() {
                    return Err(Error::Validation(format!(
                        "scan `{}` has invalid infection_ratio {ratio}",
                        r.scan_id
                    )));
                }
            }
        }
        Ok(Manifest {
            records,
            split_tag: split_tag.into(),
            base_dir: base_dir.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn patients(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.records.iter().map(|r| r.patient_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    fn subset(&self, keep: impl Fn(&ScanRecord) -> bool, tag: String) -> Result<Manifest> {
        let records = self.records.iter().filter(|r| keep(r)).cloned().collect();
        Manifest::new(records, tag, self.base_dir.clone())
    }

    /// Recomputes the infection ratio of `record` from its mask files.
    pub fn recompute_ratio(&self, record: &ScanRecord) -> Result<f64> {
        let lung = read_nifti(&self.resolve(&record.lung_mask_path))?;
        let infection = read_nifti(&self.resolve(&record.infection_mask_path))?;
        infection_ratio(&infection, &lung)
    }

    /// Checks every cached ratio against the masks on disk (tolerance 1e-9).
    pub fn verify_ratios(&self) -> Result<()> {
        for r in &self.records {
            if let Some(cached) = r.infection_ratio {
                let fresh = self.recompute_ratio(r)?;
                if (fresh - cached).abs() > 1e-9 {
                    return Err(Error::Validation(format!(
                        "scan `{}`: cached ratio {cached} differs from recomputed {fresh}",
                        r.scan_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Parses a JSON-Lines manifest. Relative paths resolve against the file's directory.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ScanRecord = serde_json::from_str(line).map_err(|e| Error::ManifestParse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let tag = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Manifest::new(records, tag, base)
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let mut out = Vec::new();
    for r in &manifest.records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Ratio of positive infection voxels to positive lung voxels.
pub fn infection_ratio(infection_mask: &Volume, lung_mask: &Volume) -> Result<f64> {
    if infection_mask.shape() != lung_mask.shape() {
        return Err(Error::ShapeMismatch(format!(
            "infection mask {:?} vs lung mask {:?}",
            infection_mask.shape(),
            lung_mask.shape()
        )));
    }
    let lung = lung_mask.count_positive();
    if lung == 0 {
        return Err(Error::EmptyLung);
    }
    Ok(infection_mask.count_positive() as f64 / lung as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SamplingGroup {
    #[serde(rename = "COVID_SMALL")]
    CovidSmall,
    #[serde(rename = "COVID_LARGE")]
    CovidLarge,
    #[serde(rename = "CAP_SMALL")]
    CapSmall,
    #[serde(rename = "CAP_LARGE")]
    CapLarge,
}

impl SamplingGroup {
    pub const ALL: [SamplingGroup; 4] = [
        SamplingGroup::CovidSmall,
        SamplingGroup::CovidLarge,
        SamplingGroup::CapSmall,
        SamplingGroup::CapLarge,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            SamplingGroup::CovidSmall => "COVID_SMALL",
            SamplingGroup::CovidLarge => "COVID_LARGE",
            SamplingGroup::CapSmall => "CAP_SMALL",
            SamplingGroup::CapLarge => "CAP_LARGE",
        }
    }
}

/// COVID below 0.030 is small; CAP above 0.001 is large. Boundary values fall
/// on the non-strict side (COVID 0.030 is large, CAP 0.001 is small).
pub fn assign_sampling_group(label: ClassLabel, ratio: f64) -> SamplingGroup {
    match label {
        ClassLabel::Covid if ratio < COVID_SMALL_BELOW => SamplingGroup::CovidSmall,
        ClassLabel::Covid => SamplingGroup::CovidLarge,
        ClassLabel::Cap if ratio > CAP_LARGE_ABOVE => SamplingGroup::CapLarge,
        ClassLabel::Cap => SamplingGroup::CapSmall,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EvalGroup {
    #[serde(rename = "LOW")]
    Low,
    #[serde(rename = "MID")]
    Mid,
    #[serde(rename = "HIGH")]
    High,
}

impl EvalGroup {
    pub const ALL: [EvalGroup; 3] = [EvalGroup::Low, EvalGroup::Mid, EvalGroup::High];

    pub fn name(self) -> &'static str {
        match self {
            EvalGroup::Low => "LOW",
            EvalGroup::Mid => "MID",
            EvalGroup::High => "HIGH",
        }
    }
}

/// Bands `[0, 0.005)`, `[0.005, 0.030]`, `(0.030, inf)`.
pub fn assign_eval_group(ratio: f64) -> Result<EvalGroup> {
    if !(ratio >= 0.0) {
        return Err(Error::invalid(format!("infection ratio must be >= 0, got {ratio}")));
    }
    Ok(if ratio < EVAL_LOW_BELOW {
        EvalGroup::Low
    } else if ratio <= EVAL_HIGH_ABOVE {
        EvalGroup::Mid
    } else {
        EvalGroup::High
    })
}

/// Splits `manifest` into `k` (train, validation) pairs so that every patient's
/// scans land in exactly one validation fold.
///
/// Patient ids are sorted, shuffled with `seed`, then dealt round-robin.
pub fn patient_level_folds(manifest: &Manifest, k: usize, seed: u64) -> Result<Vec<(Manifest, Manifest)>> {
    if k < 2 {
        return Err(Error::invalid(format!("k must be >= 2, got {k}")));
    }
    let mut patients = manifest.patients();
    if patients.len() < k {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the number of distinct patients ({})",
            patients.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);
    let fold_of: BTreeMap<&str, usize> = patients
        .iter()
        .enumerate()
        .map(|(i, p)| (p.as_str(), i % k))
        .collect();

    (0..k)
        .map(|fold| {
            let train = manifest.subset(|r| fold_of[r.patient_id.as_str()] != fold, format!("fold{fold}/train"))?;
            let val = manifest.subset(|r| fold_of[r.patient_id.as_str()] == fold, format!("fold{fold}/val"))?;
            Ok((train, val))
        })
        .collect()
}
