//! Heatmap explainers selectable by name: the online attention map T(A) and
//! the offline Grad-CAM baseline.

use ndarray::{Array3, ArrayView3};

use crate::error::Result;
use crate::net::{forward, grad_cam, soft_mask, ModelState};
use crate::registry::Registry;

pub trait Explainer: Send + Sync {
    fn name(&self) -> &'static str;

    /// Heatmap with the shape of `volume`.
    fn explain(&self, state: &ModelState, volume: ArrayView3<'_, f64>) -> Result<Array3<f64>>;
}

pub struct AttentionExplainer;

impl Explainer for AttentionExplainer {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn explain(&self, state: &ModelState, volume: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
        let out = forward(state, volume)?;
        let (d, h, w) = volume.dim();
        Ok(soft_mask(out.raw_attention.view(), [d, h, w], state.config.alpha, state.config.beta).values)
    }
}

pub struct GradCamExplainer;

impl Explainer for GradCamExplainer {
    fn name(&self) -> &'static str {
        "grad-cam"
    }

    fn explain(&self, state: &ModelState, volume: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
        Ok(grad_cam(state, volume)?.heatmap)
    }
}

pub fn explainer_registry() -> Registry<dyn Explainer> {
    let mut r: Registry<dyn Explainer> = Registry::new("explainer");
    r.register("attention", || Box::new(AttentionExplainer));
    r.register("grad-cam", || Box::new(GradCamExplainer));
    r
}
