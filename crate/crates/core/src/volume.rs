//! Scalar 3D volumes with physical spacing, and NIfTI-1 file I/O.
//!
//! Arrays are indexed `[z, y, x]` (depth, height, width) and spacing follows the
//! same order. NIfTI stores `x` fastest with `pixdim[1..=3] = (x, y, z)`; the
//! reader and writer swap axes accordingly.

use std::path::Path;

use ndarray::{Array3, Ix3};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Array3<f32>,
    /// Millimetres per voxel along (z, y, x).
    pub spacing: [f64; 3],
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!("spacing must be positive, got {spacing:?}")));
        }
        if data.iter().len() == 0 {
            return Err(Error::invalid("volume has an empty dimension"));
        }
        Ok(Volume { data, spacing })
    }

    pub fn zeros(shape: [usize; 3], spacing: [f64; 3]) -> Self {
        Volume {
            data: Array3::zeros(shape),
            spacing,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        let (d, h, w) = self.data.dim();
        [d, h, w]
    }

    /// Number of voxels with value > 0.5, the binary-mask count.
    pub fn count_positive(&self) -> usize {
        self.data.iter().filter(|v| **v > 0.5).count()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0 || *v == 1.0)
    }
}

/// Reads a 3D NIfTI-1 file (`.nii` or `.nii.gz`) into a [`Volume`].
pub fn read_nifti(path: &Path) -> Result<Volume> {
    let nerr = |e: nifti::NiftiError| match e {
        nifti::NiftiError::Io(source) => Error::io(path, source),
        other => Error::Nifti {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    };
    let obj = ReaderOptions::new().read_file(path).map_err(nerr)?;
    let header = obj.header().clone();
    let arr = obj.into_volume().into_ndarray::<f32>().map_err(nerr)?;
    if arr.ndim() != 3 {
        return Err(Error::Nifti {
            path: path.to_path_buf(),
            message: format!("expected a 3D volume, found {} dimensions", arr.ndim()),
        });
    }
    let xyz = arr
        .into_dimensionality::<Ix3>()
        .map_err(|e| Error::Nifti {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    let data = xyz.reversed_axes().as_standard_layout().into_owned();
    let px = &header.pixdim;
    let spacing = [px[3] as f64, px[2] as f64, px[1] as f64].map(|s| if s > 0.0 { s } else { 1.0 });
    Volume::new(data, spacing)
}

fn header_for(spacing: [f64; 3]) -> NiftiHeader {
    let mut header = NiftiHeader::default();
    header.pixdim = [1.0, spacing[2] as f32, spacing[1] as f32, spacing[0] as f32, 1.0, 1.0, 1.0, 1.0];
    header.xyzt_units = 2; // millimetres
    header.sform_code = 0;
    header.qform_code = 0;
    header
}

/// Writes an intensity volume as float32 NIfTI-1.
pub fn write_nifti(path: &Path, volume: &Volume) -> Result<()> {
    let header = header_for(volume.spacing);
    let xyz = volume.data.view().reversed_axes();
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&xyz)
        .map_err(|e| match e {
            nifti::NiftiError::Io(source) => Error::io(path, source),
            other => Error::Nifti {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })
}

/// Writes a binary mask as uint8 NIfTI-1.
pub fn write_mask_nifti(path: &Path, mask: &Volume) -> Result<()> {
    let header = header_for(mask.spacing);
    let bytes = mask.data.mapv(|v| u8::from(v > 0.5));
    let xyz = bytes.view().reversed_axes();
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&xyz)
        .map_err(|e| match e {
            nifti::NiftiError::Io(source) => Error::io(path, source),
            other => Error::Nifti {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })
}
