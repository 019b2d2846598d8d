//! Model checkpoints: parameters and running statistics in a safetensors file
//! plus a JSON metadata sidecar. Both are written to a temporary name first
//! and renamed into place.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::IxDyn;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::net::{init_model, ModelState, NetworkConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub network: NetworkConfig,
    pub epoch: usize,
    pub val_auc: Option<f64>,
    pub seed: u64,
    pub sampling_strategy: String,
    pub lambda: f64,
    /// Network input grid `[D, H, W]`.
    pub input_shape: [usize; 3],
}

pub fn sidecar_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

fn to_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes `{path}` (safetensors) and its `.json` sidecar.
pub fn save_checkpoint(path: &Path, state: &ModelState, meta: &CheckpointMeta) -> Result<()> {
    if meta.network != state.config {
        return Err(Error::Checkpoint("metadata network config differs from the model".into()));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut blobs: Vec<(String, Vec<usize>, Vec<u8>)> = state
        .param_names()
        .iter()
        .zip(state.params())
        .map(|(n, t)| (n.clone(), t.shape().to_vec(), to_bytes(t.iter().copied())))
        .collect();
    for (n, b) in state.buffers() {
        blobs.push((n.clone(), vec![b.len()], to_bytes(b.iter().copied())));
    }
    let views = blobs
        .iter()
        .map(|(n, shape, data)| {
            TensorView::new(Dtype::F64, shape.clone(), data)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let tmp = tmp_path(path);
    safetensors::serialize_to_file(views, None, &tmp).map_err(|e| Error::Checkpoint(format!("{}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;

    let side = sidecar_path(path);
    let tmp = tmp_path(&side);
    std::fs::write(&tmp, serde_json::to_vec_pretty(meta)?).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, &side).map_err(|e| Error::io(&side, e))?;
    Ok(())
}

pub fn load_meta(path: &Path) -> Result<CheckpointMeta> {
    let side = sidecar_path(path);
    let text = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
    Ok(serde_json::from_slice(&text)?)
}

fn read_f64(st: &SafeTensors<'_>, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
    let view = st.tensor(name).map_err(|_| Error::Checkpoint(format!("missing tensor `{name}`")))?;
    if view.dtype() != Dtype::F64 {
        return Err(Error::Checkpoint(format!("tensor `{name}` is {:?}, expected F64", view.dtype())));
    }
    let data = view
        .data()
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((view.shape().to_vec(), data))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelState, CheckpointMeta)> {
    let meta = load_meta(path)?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let layout = init_model(&meta.network, 0)?;
    let mut params = Vec::with_capacity(layout.params().len());
    for name in layout.param_names() {
        let (shape, data) = read_f64(&st, name)?;
        let t = Tensor::from_shape_vec(IxDyn(&shape), data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        params.push((name.clone(), t));
    }
    let mut buffers = BTreeMap::new();
    for name in layout.buffers().keys() {
        buffers.insert(name.clone(), read_f64(&st, name)?.1);
    }
    let expected = layout.param_names().len() + layout.buffers().len();
    if st.len() != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, network config expects {expected}",
            st.len()
        )));
    }
    Ok((ModelState::from_parts(meta.network.clone(), params, buffers)?, meta))
}
