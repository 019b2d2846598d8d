//! 3D residual classifier with an online class-activation attention head.
//!
//! The backbone is a 3D ResNet (basic blocks) whose last stage keeps stride 1,
//! so features sit at 1/16 of the input resolution. The attention head reuses
//! the classifier weight vector as a 1x1x1 kernel on the final features,
//! followed by ReLU; the kernel is a detached copy, so attention losses never
//! update the classifier weight directly.

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array3, Array4, ArrayView3, ArrayView4, Ix3, Ix4, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autograd::{channel_contract, minmax_normalize, resize_forward, resize_taps, scaled_sigmoid, Tape, Tensor, Var, BN_EPS};
use crate::error::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.1;
const STEM_KERNEL: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub block_counts: [usize; 4],
    pub base_channels: usize,
    /// Stride of the first block of each residual stage; the stem adds a
    /// further factor of 4 (strided convolution and max pooling).
    pub stage_strides: [usize; 4],
    pub alpha: f64,
    pub beta: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            block_counts: [3, 4, 6, 3],
            base_channels: 64,
            stage_strides: [1, 2, 2, 1],
            alpha: 100.0,
            beta: 0.4,
        }
    }
}

impl NetworkConfig {
    /// Small configuration for tests and desk-scale runs.
    pub fn tiny() -> Self {
        NetworkConfig {
            block_counts: [2, 2, 2, 2],
            base_channels: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_strides[3] != 1 {
            return Err(Error::invalid("the last residual stage must have stride 1"));
        }
        if self.stage_strides.iter().any(|s| !matches!(s, 1 | 2)) {
            return Err(Error::invalid(format!("stage strides must be 1 or 2, got {:?}", self.stage_strides)));
        }
        if self.stage_strides.iter().product::<usize>() != 4 {
            return Err(Error::invalid("stage strides must reduce resolution by 4 (16 including the stem)"));
        }
        if self.block_counts.contains(&0) || self.base_channels == 0 {
            return Err(Error::invalid("block counts and base channels must be positive"));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::invalid(format!("beta must be in (0, 1), got {}", self.beta)));
        }
        Ok(())
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    pub fn feature_channels(&self) -> usize {
        self.stage_channels(3)
    }

    /// Spatial dims of the final feature grid: ceil-halving per stride-2 step.
    pub fn feature_shape(&self, input: [usize; 3]) -> [usize; 3] {
        let half = |d: usize| d.div_ceil(2);
        let mut dims = input.map(half).map(half);
        for s in self.stage_strides {
            if s == 2 {
                dims = dims.map(half);
            }
        }
        dims
    }
}

/// Learnable parameters plus batch-normalization running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: NetworkConfig,
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
    buffers: BTreeMap<String, Vec<f64>>,
}

impl ModelState {
    pub(crate) fn from_parts(config: NetworkConfig, params: Vec<(String, Tensor)>, buffers: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        config.validate()?;
        let (names, values): (Vec<String>, Vec<Tensor>) = params.into_iter().unzip();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        let state = ModelState {
            config,
            names,
            values,
            index,
            buffers,
        };
        // Shape check against a freshly laid-out model.
        let reference = init_model(&state.config, 0)?;
        if reference.names != state.names {
            return Err(Error::Checkpoint("parameter names do not match the network config".into()));
        }
        for (name, (a, b)) in state.names.iter().zip(reference.values.iter().zip(&state.values)) {
            if a.shape() != b.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, config expects {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        for (k, v) in &reference.buffers {
            match state.buffers.get(k) {
                Some(b) if b.len() == v.len() => {}
                _ => return Err(Error::Checkpoint(format!("missing or malformed buffer `{k}`"))),
            }
        }
        Ok(state)
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.values
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self.values[self.index[name]]
    }

    pub fn buffers(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.buffers
    }

    pub fn num_params(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn classifier_weight(&self) -> &Tensor {
        self.param("fc.weight")
    }

    /// The 1x1x1 attention kernel. It is the classifier weight itself, so the
    /// two can never diverge.
    pub fn attention_kernel(&self) -> &Tensor {
        self.classifier_weight()
    }

    /// Exponential moving update of running statistics from one training batch.
    pub fn update_running_stats(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let rm = self.buffers.get_mut(&format!("{}.running_mean", u.prefix)).expect("running mean");
            for (r, m) in rm.iter_mut().zip(&u.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let rv = self.buffers.get_mut(&format!("{}.running_var", u.prefix)).expect("running var");
            for (r, v) in rv.iter_mut().zip(&u.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
    }
}

struct Initializer {
    rng: ChaCha8Rng,
    params: Vec<(String, Tensor)>,
    buffers: BTreeMap<String, Vec<f64>>,
}

impl Initializer {
    /// Kaiming-normal with fan-out scaling.
    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) {
        let std = (2.0 / (cout * k * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let len = cout * cin * k * k * k;
        let data: Vec<f64> = (0..len).map(|_| normal.sample(&mut self.rng)).collect();
        self.params.push((
            format!("{name}.weight"),
            Tensor::from_shape_vec(IxDyn(&[cout, cin, k, k, k]), data).expect("conv shape"),
        ));
    }

    fn bn(&mut self, name: &str, c: usize) {
        self.params.push((format!("{name}.weight"), Tensor::ones(IxDyn(&[c]))));
        self.params.push((format!("{name}.bias"), Tensor::zeros(IxDyn(&[c]))));
        self.buffers.insert(format!("{name}.running_mean"), vec![0.0; c]);
        self.buffers.insert(format!("{name}.running_var"), vec![1.0; c]);
    }
}

/// Deterministic initialization under `seed`.
pub fn init_model(config: &NetworkConfig, seed: u64) -> Result<ModelState> {
    config.validate()?;
    let mut init = Initializer {
        rng: ChaCha8Rng::seed_from_u64(seed),
        params: Vec::new(),
        buffers: BTreeMap::new(),
    };
    let c0 = config.stage_channels(0);
    init.conv("conv1", c0, 1, STEM_KERNEL);
    init.bn("bn1", c0);
    let mut cin = c0;
    for stage in 0..4 {
        let cout = config.stage_channels(stage);
        for block in 0..config.block_counts[stage] {
            let stride = if block == 0 { config.stage_strides[stage] } else { 1 };
            let p = format!("layer{}.{block}", stage + 1);
            init.conv(&format!("{p}.conv1"), cout, cin, 3);
            init.bn(&format!("{p}.bn1"), cout);
            init.conv(&format!("{p}.conv2"), cout, cout, 3);
            init.bn(&format!("{p}.bn2"), cout);
            if stride != 1 || cin != cout {
                init.conv(&format!("{p}.downsample.0"), cout, cin, 1);
                init.bn(&format!("{p}.downsample.1"), cout);
            }
            cin = cout;
        }
    }
    let bound = 1.0 / (cin as f64).sqrt();
    let uni = Uniform::new(-bound, bound);
    let fc: Vec<f64> = (0..cin).map(|_| uni.sample(&mut init.rng)).collect();
    init.params.push(("fc.weight".into(), Tensor::from_shape_vec(IxDyn(&[cin]), fc).expect("fc")));
    init.params.push(("fc.bias".into(), Tensor::zeros(IxDyn(&[1]))));

    let (names, values): (Vec<String>, Vec<Tensor>) = init.params.into_iter().unzip();
    let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
    Ok(ModelState {
        config: config.clone(),
        names,
        values,
        index,
        buffers: init.buffers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers.
    Train,
    /// Running statistics in normalization layers.
    Eval,
}

#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// A recorded forward pass.
pub struct Graph {
    pub tape: Tape,
    /// One leaf per model parameter, in `ModelState::params` order.
    pub param_vars: Vec<Var>,
    pub input: Var,
    /// `[N, C, D', H', W']`.
    pub features: Var,
    /// `[N]`.
    pub logits: Var,
    /// `[N, D', H', W']`, nonnegative.
    pub raw_attention: Var,
    /// Leaf holding the copy of the classifier weight used by the attention head.
    pub attention_kernel: Var,
    pub classifier_weight: Var,
    pub bn_updates: Vec<BnUpdate>,
    alpha: f64,
    beta: f64,
}

impl Graph {
    /// Upsample, min-max normalize and soft-threshold the raw attention to
    /// `input_shape`; returns the `[N, D, H, W]` attention map node.
    pub fn attention_map(&mut self, input_shape: [usize; 3]) -> Var {
        let up = self.tape.resize(self.raw_attention, input_shape);
        let norm = self.tape.minmax_normalize(up);
        self.tape.scaled_sigmoid(norm, self.alpha, self.beta)
    }
}

struct Builder<'a> {
    state: &'a ModelState,
    mode: Mode,
    tape: Tape,
    vars: Vec<Var>,
    bn_updates: Vec<BnUpdate>,
}

impl Builder<'_> {
    fn p(&self, name: &str) -> Var {
        self.vars[self.state.index[name]]
    }

    fn conv(&mut self, x: Var, name: &str, stride: usize, pad: usize) -> Var {
        let w = self.p(&format!("{name}.weight"));
        self.tape.conv3d(x, w, stride, pad)
    }

    fn bn(&mut self, x: Var, name: &str) -> Var {
        let gamma = self.p(&format!("{name}.weight"));
        let beta = self.p(&format!("{name}.bias"));
        match self.mode {
            Mode::Train => {
                let (y, mean, var) = self.tape.batch_norm(x, gamma, beta);
                self.bn_updates.push(BnUpdate {
                    prefix: name.to_string(),
                    mean,
                    var,
                });
                y
            }
            Mode::Eval => {
                let g = self.tape.value(gamma).as_slice().expect("gamma").to_vec();
                let b = self.tape.value(beta).as_slice().expect("beta").to_vec();
                let rm = &self.state.buffers[&format!("{name}.running_mean")];
                let rv = &self.state.buffers[&format!("{name}.running_var")];
                let scale: Vec<f64> = g.iter().zip(rv).map(|(g, v)| g / (v + BN_EPS).sqrt()).collect();
                let shift: Vec<f64> = b.iter().zip(rm).zip(&scale).map(|((b, m), s)| b - m * s).collect();
                self.tape.channel_affine(x, scale, shift)
            }
        }
    }

    fn block(&mut self, x: Var, prefix: &str, stride: usize) -> Var {
        let h = self.conv(x, &format!("{prefix}.conv1"), stride, 1);
        let h = self.bn(h, &format!("{prefix}.bn1"));
        let h = self.tape.relu(h);
        let h = self.conv(h, &format!("{prefix}.conv2"), 1, 1);
        let h = self.bn(h, &format!("{prefix}.bn2"));
        let shortcut = if self.state.index.contains_key(&format!("{prefix}.downsample.0.weight")) {
            let s = self.conv(x, &format!("{prefix}.downsample.0"), stride, 0);
            self.bn(s, &format!("{prefix}.downsample.1"))
        } else {
            x
        };
        let sum = self.tape.add(h, shortcut);
        self.tape.relu(sum)
    }
}

/// Records a forward pass over a `[N, 1, D, H, W]` batch.
pub fn build_graph(state: &ModelState, input: Tensor, mode: Mode) -> Result<Graph> {
    record(state, input, mode, None)
}

/// Like [`build_graph`], but the attention head uses `kernel` instead of a
/// copy of the classifier weight. With `kernel` held fixed, the loss is the
/// function whose gradient `build_graph` computes, which is what a
/// finite-difference check needs.
pub fn build_graph_with_attention_kernel(state: &ModelState, input: Tensor, mode: Mode, kernel: &Tensor) -> Result<Graph> {
    if kernel.shape() != state.classifier_weight().shape() {
        return Err(Error::ShapeMismatch(format!(
            "attention kernel {:?} vs classifier weight {:?}",
            kernel.shape(),
            state.classifier_weight().shape()
        )));
    }
    record(state, input, mode, Some(kernel))
}

fn record(state: &ModelState, input: Tensor, mode: Mode, kernel: Option<&Tensor>) -> Result<Graph> {
    if input.ndim() != 5 || input.shape()[1] != 1 {
        return Err(Error::ShapeMismatch(format!("expected [N, 1, D, H, W] input, got {:?}", input.shape())));
    }
    if input.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("input contains non-finite values"));
    }
    let mut b = Builder {
        state,
        mode,
        tape: Tape::new(),
        vars: Vec::with_capacity(state.values.len()),
        bn_updates: Vec::new(),
    };
    for v in &state.values {
        let var = b.tape.leaf(v.clone());
        b.vars.push(var);
    }
    let x = b.tape.leaf(input);
    let h = b.conv(x, "conv1", 2, STEM_KERNEL / 2);
    let h = b.bn(h, "bn1");
    let h = b.tape.relu(h);
    let mut h = b.tape.max_pool3d(h);
    let cfg = &state.config;
    for stage in 0..4 {
        for block in 0..cfg.block_counts[stage] {
            let stride = if block == 0 { cfg.stage_strides[stage] } else { 1 };
            h = b.block(h, &format!("layer{}.{block}", stage + 1), stride);
        }
    }
    let features = h;
    let pooled = b.tape.global_avg_pool(features);
    let fc_w = b.p("fc.weight");
    let fc_b = b.p("fc.bias");
    let logits = b.tape.linear(pooled, fc_w, fc_b);
    let kernel = match kernel {
        Some(k) => b.tape.leaf(k.clone()),
        None => b.tape.detach(fc_w),
    };
    let cam = b.tape.channel_contract(features, kernel);
    let raw_attention = b.tape.relu(cam);
    Ok(Graph {
        tape: b.tape,
        param_vars: b.vars,
        input: x,
        features,
        logits,
        raw_attention,
        attention_kernel: kernel,
        classifier_weight: fc_w,
        bn_updates: b.bn_updates,
        alpha: cfg.alpha,
        beta: cfg.beta,
    })
}

/// Stacks volumes into a `[N, 1, D, H, W]` tensor.
pub fn batch_tensor(volumes: &[ArrayView3<'_, f32>]) -> Result<Tensor> {
    let first = volumes.first().ok_or_else(|| Error::invalid("empty batch"))?.dim();
    let mut data = Vec::with_capacity(volumes.len() * first.0 * first.1 * first.2);
    for v in volumes {
        if v.dim() != first {
            return Err(Error::ShapeMismatch(format!("batch volumes {:?} vs {:?}", v.dim(), first)));
        }
        data.extend(v.iter().map(|x| *x as f64));
    }
    Ok(Tensor::from_shape_vec(IxDyn(&[volumes.len(), 1, first.0, first.1, first.2]), data).expect("batch shape"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logit: f64,
    /// `[C, D', H', W']`.
    pub features: Array4<f64>,
    /// `[D', H', W']`.
    pub raw_attention: Array3<f64>,
}

/// Inference on one volume (running statistics in normalization layers).
pub fn forward(state: &ModelState, volume: ArrayView3<'_, f64>) -> Result<ForwardOutput> {
    let (d, h, w) = volume.dim();
    let input = volume.to_owned().into_shape_with_order(IxDyn(&[1, 1, d, h, w])).expect("reshape");
    let g = build_graph(state, input, Mode::Eval)?;
    let f = g.tape.value(g.features);
    let fshape = f.shape()[1..].to_vec();
    let features = f
        .clone()
        .into_shape_with_order(IxDyn(&fshape))
        .expect("drop batch")
        .into_dimensionality::<Ix4>()
        .expect("4D features");
    let a = g.tape.value(g.raw_attention);
    let raw_attention = a
        .clone()
        .into_shape_with_order(IxDyn(&fshape[1..]))
        .expect("drop batch")
        .into_dimensionality::<Ix3>()
        .expect("3D attention");
    Ok(ForwardOutput {
        logit: g.tape.value(g.logits)[[0]],
        features,
        raw_attention,
    })
}

/// `A = max(0, sum_c w_c f_c)` with no bias.
pub fn raw_attention(features: ArrayView4<'_, f64>, w: &[f64]) -> Result<Array3<f64>> {
    let (c, d, h, wd) = features.dim();
    if c != w.len() {
        return Err(Error::ShapeMismatch(format!("{c} feature channels vs kernel of length {}", w.len())));
    }
    let f = features.to_owned().into_shape_with_order(IxDyn(&[1, c, d, h, wd])).expect("add batch");
    let a = channel_contract(&f, w).mapv(|v| v.max(0.0));
    Ok(a.into_shape_with_order((d, h, wd)).expect("3D"))
}

/// Soft attention map at input resolution, values in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub values: Array3<f64>,
}

/// Trilinear upsampling to `input_shape` followed by min-max normalization
/// (a constant map becomes all zeros).
pub fn upsample_normalized(a: ArrayView3<'_, f64>, input_shape: [usize; 3]) -> Array3<f64> {
    let (d, h, w) = a.dim();
    let batched = a.to_owned().into_shape_with_order(IxDyn(&[1, d, h, w])).expect("add batch");
    let up = resize_forward(&batched, &resize_taps(&[d, h, w], input_shape));
    let (norm, _) = minmax_normalize(&up);
    norm.into_shape_with_order(input_shape).expect("3D")
}

/// Trilinear upsampling to `input_shape`, min-max normalization (a constant
/// map becomes all zeros), then `1 / (1 + exp(-alpha (x - beta)))`.
pub fn soft_mask(a: ArrayView3<'_, f64>, input_shape: [usize; 3], alpha: f64, beta: f64) -> AttentionMap {
    let norm = upsample_normalized(a, input_shape);
    AttentionMap {
        values: norm.mapv(|v| scaled_sigmoid(v, alpha, beta)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCam {
    /// Min-max normalized heatmap at input resolution.
    pub heatmap: Array3<f64>,
    /// ReLU-clipped gradient-weighted channel combination at feature resolution.
    pub coarse: Array3<f64>,
}

/// Gradient-weighted class activation map of the single logit.
pub fn grad_cam(state: &ModelState, volume: ArrayView3<'_, f64>) -> Result<GradCam> {
    let (d, h, w) = volume.dim();
    let input = volume.to_owned().into_shape_with_order(IxDyn(&[1, 1, d, h, w])).expect("reshape");
    let mut g = build_graph(state, input, Mode::Eval)?;
    let root = g.tape.weighted_sum(g.logits, vec![1.0]);
    let grads = g.tape.backward(root, &[g.features]);
    let f = g.tape.value(g.features);
    let df = grads.get_or_zeros(g.features, f);
    let c = f.shape()[1];
    let sp: usize = f.shape()[2..].iter().product();
    let dfs = df.as_slice().expect("standard layout");
    let weights: Vec<f64> = (0..c).map(|ch| dfs[ch * sp..(ch + 1) * sp].iter().sum::<f64>() / sp as f64).collect();
    let fshape = f.shape()[2..].to_vec();
    let coarse = channel_contract(f, &weights)
        .mapv(|v| v.max(0.0))
        .into_shape_with_order((fshape[0], fshape[1], fshape[2]))
        .expect("3D");
    let heatmap = upsample_normalized(coarse.view(), [d, h, w]);
    Ok(GradCam { heatmap, coarse })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::Rng;

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            block_counts: [1, 1, 1, 1],
            base_channels: 4,
            ..NetworkConfig::default()
        }
    }

    fn random_volume(shape: [usize; 3], seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_simple_fn(shape, || rng.gen_range(0.0..1.0))
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model(&tiny(), 1).unwrap();
        let b = init_model(&tiny(), 1).unwrap();
        assert_eq!(a, b);
        let c = init_model(&tiny(), 2).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn last_stride_two_is_rejected() {
        let cfg = NetworkConfig {
            stage_strides: [1, 2, 1, 2],
            ..NetworkConfig::default()
        };
        assert!(init_model(&cfg, 0).is_err());
        assert!(NetworkConfig { beta: 1.0, ..NetworkConfig::default() }.validate().is_err());
        assert!(NetworkConfig { alpha: 0.0, ..NetworkConfig::default() }.validate().is_err());
    }

    #[test]
    fn feature_shape_chain() {
        let cfg = NetworkConfig::default();
        assert_eq!(cfg.feature_shape([138, 256, 256]), [9, 16, 16]);
        assert_eq!(cfg.feature_shape([32, 32, 32]), [2, 2, 2]);
    }

    #[test]
    fn forward_shapes_match_chain() {
        let state = init_model(&tiny(), 3).unwrap();
        for shape in [[32, 32, 32], [20, 24, 17]] {
            let out = forward(&state, random_volume(shape, 1).view()).unwrap();
            let fs = state.config.feature_shape(shape);
            assert_eq!(out.features.dim(), (state.config.feature_channels(), fs[0], fs[1], fs[2]));
            assert_eq!(out.raw_attention.dim(), (fs[0], fs[1], fs[2]));
            assert!(out.logit.is_finite());
            assert!(out.raw_attention.iter().all(|a| *a >= 0.0));
        }
    }

    #[test]
    fn zero_input_is_finite() {
        let state = init_model(&tiny(), 3).unwrap();
        let out = forward(&state, Array3::zeros((32, 32, 32)).view()).unwrap();
        assert!(out.logit.is_finite());
        assert!(out.features.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn non_finite_input_rejected() {
        let state = init_model(&tiny(), 3).unwrap();
        let mut v = Array3::zeros((16, 16, 16));
        v[[1, 2, 3]] = f64::NAN;
        assert!(forward(&state, v.view()).is_err());
    }

    #[test]
    fn raw_attention_examples() {
        let f = Array4::from_elem((1, 2, 2, 2), 2.0);
        assert!(raw_attention(f.view(), &[0.0]).unwrap().iter().all(|a| *a == 0.0));
        assert!(raw_attention(f.view(), &[1.5]).unwrap().iter().all(|a| *a == 3.0));
        assert!(raw_attention(f.view(), &[-1.0]).unwrap().iter().all(|a| *a == 0.0));
        assert!(raw_attention(f.view(), &[1.0, 2.0]).is_err());
    }

    #[test]
    fn forward_attention_matches_standalone_kernel() {
        let state = init_model(&tiny(), 5).unwrap();
        let out = forward(&state, random_volume([32, 32, 32], 2).view()).unwrap();
        let w = state.attention_kernel().as_slice().unwrap();
        let a = raw_attention(out.features.view(), w).unwrap();
        assert_eq!(a, out.raw_attention);
    }

    #[test]
    fn soft_mask_values() {
        // A 1x1x2 map [0, 1] upsamples to [0, 0.25, 0.75, 1] along x (half-voxel
        // centres), which normalizes to itself.
        let a = Array3::from_shape_vec((1, 1, 2), vec![0.0, 1.0]).unwrap();
        let t = soft_mask(a.view(), [1, 1, 4], 100.0, 0.4);
        let expect = |x: f64| 1.0 / (1.0 + (-100.0 * (x - 0.4)).exp());
        for (i, x) in [0.0, 0.25, 0.75, 1.0].iter().enumerate() {
            assert!((t.values[[0, 0, i]] - expect(*x)).abs() < 1e-12);
            assert!(t.values[[0, 0, i]] > 0.0 && t.values[[0, 0, i]] < 1.0);
        }
        assert!((scaled_sigmoid(0.4, 100.0, 0.4) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constant_attention_maps_to_zero_before_sigmoid() {
        let a = Array3::from_elem((2, 2, 2), 0.7);
        let t = soft_mask(a.view(), [8, 8, 8], 100.0, 0.4);
        let at_zero = 1.0 / (1.0 + 40f64.exp());
        assert!(t.values.iter().all(|v| (*v - at_zero).abs() < 1e-18));
    }

    #[test]
    fn grad_cam_shape_and_range() {
        let state = init_model(&tiny(), 9).unwrap();
        let v = random_volume([32, 32, 32], 4);
        let cam = grad_cam(&state, v.view()).unwrap();
        assert_eq!(cam.heatmap.dim(), (32, 32, 32));
        assert!(cam.heatmap.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn running_stats_update() {
        let mut state = init_model(&tiny(), 0).unwrap();
        let input = batch_tensor(&[random_volume([16, 16, 16], 1).mapv(|x| x as f32).view(), random_volume([16, 16, 16], 2).mapv(|x| x as f32).view()]).unwrap();
        let g = build_graph(&state, input, Mode::Train).unwrap();
        let before = state.buffers()["bn1.running_mean"].clone();
        state.update_running_stats(&g.bn_updates);
        let after = &state.buffers()["bn1.running_mean"];
        for ((b, a), u) in before.iter().zip(after).zip(&g.bn_updates[0].mean) {
            assert!((a - (0.9 * b + 0.1 * u)).abs() < 1e-15);
        }
    }

    #[test]
    fn from_parts_rejects_wrong_shapes() {
        let state = init_model(&tiny(), 0).unwrap();
        let mut params: Vec<(String, Tensor)> = state.param_names().iter().cloned().zip(state.params().iter().cloned()).collect();
        params.last_mut().unwrap().1 = Tensor::zeros(IxDyn(&[2]));
        assert!(ModelState::from_parts(tiny(), params, state.buffers().clone()).is_err());
    }
}
