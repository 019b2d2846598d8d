//! A small reverse-mode tape over `f64` tensors.
//!
//! Only the operations the attention network and its losses need are
//! provided. Nodes are appended in evaluation order, so a reverse sweep over
//! node indices is a valid topological order for backpropagation.
//!
//! Layout conventions: volumetric activations are `[N, C, D, H, W]`, attention
//! grids are `[N, D, H, W]`, per-sample vectors are `[N]`, scalars are `[]`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, ArrayD, ArrayView2, ArrayViewMut2, IxDyn};

use crate::interp::{apply_axis, apply_axis_adjoint, AxisTaps};

pub type Tensor = ArrayD<f64>;

pub const BN_EPS: f64 = 1e-5;
/// Stabilizer in the denominator of the attention loss.
pub const ATTENTION_LOSS_EPS: f64 = 1e-8;
/// Largest `f64` below one; soft-mask outputs are kept strictly inside (0, 1).
pub const SOFT_MASK_CEIL: f64 = 1.0 - f64::EPSILON / 2.0;

/// Column-buffer budget (in elements) for one im2col chunk.
const IM2COL_CHUNK: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv3d { x: Var, w: Var, stride: usize, pad: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    ChannelAffine { x: Var, scale: Vec<f64> },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    MaxPool3d { x: Var, argmax: Vec<usize> },
    GlobalAvgPool { x: Var },
    Linear { x: Var, w: Var, b: Var },
    ChannelContract { f: Var, w: Var },
    Resize { x: Var, taps: [AxisTaps; 3] },
    MinMaxNorm { x: Var, extrema: Vec<Option<(usize, usize, f64)>> },
    ScaledSigmoid { x: Var, alpha: f64 },
    AttentionLoss { t: Var, mask: Tensor },
    BceWithLogits { z: Var, targets: Vec<f64> },
    WeightedSum { x: Var, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients from one backward sweep. Leaves are always kept; interior nodes
/// only when requested.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when no path reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.raw_dim()))
    }
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

struct ConvGeom {
    cin: usize,
    dims: [usize; 3],
    k: usize,
    stride: usize,
    pad: usize,
    out: [usize; 3],
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.out[1] * self.out[2]
    }

    /// Output depth slices per im2col chunk.
    fn slab(&self) -> usize {
        (IM2COL_CHUNK / (self.rows() * self.plane()).max(1)).clamp(1, self.out[0])
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Fills `col` (`rows x (z1 - z0) * plane`) for output depths `z0..z1`.
    fn im2col(&self, x: &[f64], z0: usize, z1: usize, col: &mut [f64]) {
        let [d, h, w] = self.dims;
        let [_, oh, ow] = self.out;
        let (k, s, p) = (self.k as isize, self.stride as isize, self.pad as isize);
        let ncols = (z1 - z0) * oh * ow;
        let mut r = 0;
        for ci in 0..self.cin {
            let xc = &x[ci * d * h * w..(ci + 1) * d * h * w];
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let row = &mut col[r * ncols..(r + 1) * ncols];
                        let mut idx = 0;
                        for oz in z0..z1 {
                            let iz = oz as isize * s + kd - p;
                            if iz < 0 || iz >= d as isize {
                                row[idx..idx + oh * ow].fill(0.0);
                                idx += oh * ow;
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = oy as isize * s + kh - p;
                                if iy < 0 || iy >= h as isize {
                                    row[idx..idx + ow].fill(0.0);
                                    idx += ow;
                                    continue;
                                }
                                let base = (iz as usize * h + iy as usize) * w;
                                for ox in 0..ow {
                                    let ix = ox as isize * s + kw - p;
                                    row[idx] = if ix >= 0 && ix < w as isize { xc[base + ix as usize] } else { 0.0 };
                                    idx += 1;
                                }
                            }
                        }
                        r += 1;
                    }
                }
            }
        }
    }

    /// Scatter-adds `col` back into the input gradient `dx`.
    fn col2im(&self, col: &[f64], z0: usize, z1: usize, dx: &mut [f64]) {
        let [d, h, w] = self.dims;
        let [_, oh, ow] = self.out;
        let (k, s, p) = (self.k as isize, self.stride as isize, self.pad as isize);
        let ncols = (z1 - z0) * oh * ow;
        let mut r = 0;
        for ci in 0..self.cin {
            let xc = &mut dx[ci * d * h * w..(ci + 1) * d * h * w];
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let row = &col[r * ncols..(r + 1) * ncols];
                        let mut idx = 0;
                        for oz in z0..z1 {
                            let iz = oz as isize * s + kd - p;
                            if iz < 0 || iz >= d as isize {
                                idx += oh * ow;
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = oy as isize * s + kh - p;
                                if iy < 0 || iy >= h as isize {
                                    idx += ow;
                                    continue;
                                }
                                let base = (iz as usize * h + iy as usize) * w;
                                for ox in 0..ow {
                                    let ix = ox as isize * s + kw - p;
                                    if ix >= 0 && ix < w as isize {
                                        xc[base + ix as usize] += row[idx];
                                    }
                                    idx += 1;
                                }
                            }
                        }
                        r += 1;
                    }
                }
            }
        }
    }
}

fn conv_geom(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> ConvGeom {
    let xs = x.shape();
    let k = w.shape()[2];
    let dims = [xs[2], xs[3], xs[4]];
    ConvGeom {
        cin: xs[1],
        dims,
        k,
        stride,
        pad,
        out: dims.map(|l| conv_out(l, k, stride, pad)),
    }
}

fn conv3d_forward(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let g = conv_geom(x, w, stride, pad);
    let (n, cout) = (x.shape()[0], w.shape()[0]);
    let rows = g.rows();
    let p_total = g.out.iter().product::<usize>();
    let xs = x.as_slice().expect("standard layout");
    let wm = ArrayView2::from_shape((cout, rows), w.as_slice().expect("standard layout")).expect("weight shape");
    let in_stride = g.cin * g.dims.iter().product::<usize>();
    let mut out = vec![0.0; n * cout * p_total];
    let slab = g.slab();
    let mut col = vec![0.0; rows * slab * g.plane()];
    for b in 0..n {
        let xb = &xs[b * in_stride..(b + 1) * in_stride];
        let mut ob = ArrayViewMut2::from_shape((cout, p_total), &mut out[b * cout * p_total..(b + 1) * cout * p_total])
            .expect("output shape");
        if g.is_pointwise() {
            let xm = ArrayView2::from_shape((rows, p_total), xb).expect("input shape");
            general_mat_mul(1.0, &wm, &xm, 0.0, &mut ob);
            continue;
        }
        let mut z0 = 0;
        while z0 < g.out[0] {
            let z1 = (z0 + slab).min(g.out[0]);
            let ncols = (z1 - z0) * g.plane();
            g.im2col(xb, z0, z1, &mut col[..rows * ncols]);
            let cm = ArrayView2::from_shape((rows, ncols), &col[..rows * ncols]).expect("col shape");
            let mut oslab = ob.slice_mut(s![.., z0 * g.plane()..z1 * g.plane()]);
            general_mat_mul(1.0, &wm, &cm, 0.0, &mut oslab);
            z0 = z1;
        }
    }
    Tensor::from_shape_vec(IxDyn(&[n, cout, g.out[0], g.out[1], g.out[2]]), out).expect("conv output")
}

fn conv3d_backward(x: &Tensor, w: &Tensor, gout: &Tensor, stride: usize, pad: usize) -> (Tensor, Tensor) {
    let g = conv_geom(x, w, stride, pad);
    let (n, cout) = (x.shape()[0], w.shape()[0]);
    let rows = g.rows();
    let p_total = g.out.iter().product::<usize>();
    let xs = x.as_slice().expect("standard layout");
    let gs = gout.as_standard_layout();
    let gs = gs.as_slice().expect("standard layout");
    let wm = ArrayView2::from_shape((cout, rows), w.as_slice().expect("standard layout")).expect("weight shape");
    let in_stride = g.cin * g.dims.iter().product::<usize>();
    let mut dw = ndarray::Array2::<f64>::zeros((cout, rows));
    let mut dx = vec![0.0; x.len()];
    let slab = g.slab();
    let mut col = vec![0.0; rows * slab * g.plane()];
    let mut dcol = vec![0.0; rows * slab * g.plane()];
    for b in 0..n {
        let xb = &xs[b * in_stride..(b + 1) * in_stride];
        let gb = ArrayView2::from_shape((cout, p_total), &gs[b * cout * p_total..(b + 1) * cout * p_total]).expect("grad shape");
        let dxb = &mut dx[b * in_stride..(b + 1) * in_stride];
        if g.is_pointwise() {
            let xm = ArrayView2::from_shape((rows, p_total), xb).expect("input shape");
            general_mat_mul(1.0, &gb, &xm.t(), 1.0, &mut dw);
            let mut dxm = ArrayViewMut2::from_shape((rows, p_total), dxb).expect("input shape");
            general_mat_mul(1.0, &wm.t(), &gb, 1.0, &mut dxm);
            continue;
        }
        let mut z0 = 0;
        while z0 < g.out[0] {
            let z1 = (z0 + slab).min(g.out[0]);
            let ncols = (z1 - z0) * g.plane();
            g.im2col(xb, z0, z1, &mut col[..rows * ncols]);
            let cm = ArrayView2::from_shape((rows, ncols), &col[..rows * ncols]).expect("col shape");
            let gslab = gb.slice(s![.., z0 * g.plane()..z1 * g.plane()]);
            general_mat_mul(1.0, &gslab, &cm.t(), 1.0, &mut dw);
            {
                let mut dcm = ArrayViewMut2::from_shape((rows, ncols), &mut dcol[..rows * ncols]).expect("col shape");
                general_mat_mul(1.0, &wm.t(), &gslab, 0.0, &mut dcm);
            }
            g.col2im(&dcol[..rows * ncols], z0, z1, dxb);
            z0 = z1;
        }
    }
    (
        Tensor::from_shape_vec(x.raw_dim(), dx).expect("dx shape"),
        dw.into_shape_with_order(w.raw_dim()).expect("dw shape"),
    )
}

/// Batch statistics per channel: (mean, biased variance) over N and space.
fn channel_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>, usize) {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let sp: usize = x.shape()[2..].iter().product();
    let xs = x.as_slice().expect("standard layout");
    let m = (n * sp) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut acc = 0.0;
        for b in 0..n {
            acc += xs[(b * c + ch) * sp..(b * c + ch + 1) * sp].iter().sum::<f64>();
        }
        mean[ch] = acc / m;
        let mut v = 0.0;
        for b in 0..n {
            v += xs[(b * c + ch) * sp..(b * c + ch + 1) * sp]
                .iter()
                .map(|x| (x - mean[ch]).powi(2))
                .sum::<f64>();
        }
        var[ch] = v / m;
    }
    (mean, var, n * sp)
}

/// Applies `f(channel, value)` elementwise over a `[N, C, ...]` tensor.
fn map_channels(x: &Tensor, f: impl Fn(usize, f64) -> f64) -> Tensor {
    let c = x.shape()[1];
    let sp: usize = x.shape()[2..].iter().product();
    let mut out = x.as_standard_layout().into_owned();
    for (i, v) in out.iter_mut().enumerate() {
        *v = f((i / sp) % c, *v);
    }
    out
}

/// Sample-wise min-max normalization. Constant (or empty) samples map to zero.
pub fn minmax_normalize(x: &Tensor) -> (Tensor, Vec<Option<(usize, usize, f64)>>) {
    let n = x.shape()[0];
    let per: usize = x.shape()[1..].iter().product();
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let mut out = vec![0.0; x.len()];
    let mut extrema = Vec::with_capacity(n);
    for b in 0..n {
        let v = &xs[b * per..(b + 1) * per];
        let (mut imin, mut imax) = (0, 0);
        for (i, val) in v.iter().enumerate() {
            if *val < v[imin] {
                imin = i;
            }
            if *val > v[imax] {
                imax = i;
            }
        }
        let range = if per > 0 { v[imax] - v[imin] } else { 0.0 };
        if range > 0.0 && range.is_finite() {
            for (o, val) in out[b * per..(b + 1) * per].iter_mut().zip(v) {
                *o = (val - v[imin]) / range;
            }
            extrema.push(Some((imin, imax, range)));
        } else {
            extrema.push(None);
        }
    }
    (Tensor::from_shape_vec(x.raw_dim(), out).expect("same shape"), extrema)
}

/// `1 / (1 + exp(-alpha (x - beta)))`, kept below one.
pub fn scaled_sigmoid(x: f64, alpha: f64, beta: f64) -> f64 {
    (1.0 / (1.0 + (-alpha * (x - beta)).exp())).min(SOFT_MASK_CEIL)
}

/// Stable `ln(1 + exp(z)) - y z`.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - y * z + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `sum (t - m)^2 / (sum (t + m) + eps)` with its per-element gradient factor pieces.
pub fn attention_ratio(t: &[f64], m: &[f64]) -> (f64, f64) {
    let num: f64 = t.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = t.iter().zip(m).map(|(a, b)| a + b).sum::<f64>() + ATTENTION_LOSS_EPS;
    (num, den)
}

pub fn resize_taps(from: &[usize], to: [usize; 3]) -> [AxisTaps; 3] {
    [0, 1, 2].map(|a| AxisTaps::linear(from[a], to[a], from[a] as f64 / to[a] as f64))
}

/// Trilinear resize of the trailing three axes.
pub fn resize_forward(x: &Tensor, taps: &[AxisTaps; 3]) -> Tensor {
    let lead = x.ndim() - 3;
    let mut cur = x.clone();
    for (a, t) in taps.iter().enumerate() {
        if !t.is_identity() {
            cur = apply_axis(cur.view(), lead + a, t);
        }
    }
    cur
}

fn resize_backward(g: &Tensor, taps: &[AxisTaps; 3]) -> Tensor {
    let lead = g.ndim() - 3;
    let mut cur = g.clone();
    for (a, t) in taps.iter().enumerate().rev() {
        if !t.is_identity() {
            cur = apply_axis_adjoint(cur.view(), lead + a, t);
        }
    }
    cur
}

/// `out[n, s] = sum_c w[c] f[n, c, s]`.
pub fn channel_contract(f: &Tensor, w: &[f64]) -> Tensor {
    let (n, c) = (f.shape()[0], f.shape()[1]);
    let sp: usize = f.shape()[2..].iter().product();
    let fs = f.as_standard_layout();
    let fs = fs.as_slice().expect("standard layout");
    let mut out = vec![0.0; n * sp];
    for b in 0..n {
        let o = &mut out[b * sp..(b + 1) * sp];
        for (ch, wc) in w.iter().enumerate() {
            let src = &fs[(b * c + ch) * sp..(b * c + ch + 1) * sp];
            for (oi, v) in o.iter_mut().zip(src) {
                *oi += wc * v;
            }
        }
    }
    let mut shape = vec![n];
    shape.extend_from_slice(&f.shape()[2..]);
    Tensor::from_shape_vec(IxDyn(&shape), out).expect("contract shape")
}

fn maxpool3d_forward(x: &Tensor) -> (Tensor, Vec<usize>) {
    const K: isize = 3;
    const S: isize = 2;
    const P: isize = 1;
    let sh = x.shape();
    let (n, c, d, h, w) = (sh[0], sh[1], sh[2], sh[3], sh[4]);
    let out = [d, h, w].map(|l| conv_out(l, 3, 2, 1));
    let xs = x.as_slice().expect("standard layout");
    let plane_in = d * h * w;
    let mut vals = Vec::with_capacity(n * c * out.iter().product::<usize>());
    let mut arg = Vec::with_capacity(vals.capacity());
    for nc in 0..n * c {
        let base = nc * plane_in;
        for oz in 0..out[0] as isize {
            for oy in 0..out[1] as isize {
                for ox in 0..out[2] as isize {
                    let mut best = f64::NEG_INFINITY;
                    let mut besti = usize::MAX;
                    for kz in 0..K {
                        let iz = oz * S + kz - P;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for ky in 0..K {
                            let iy = oy * S + ky - P;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..K {
                                let ix = ox * S + kx - P;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let i = base + (iz as usize * h + iy as usize) * w + ix as usize;
                                if xs[i] > best || besti == usize::MAX {
                                    best = xs[i];
                                    besti = i;
                                }
                            }
                        }
                    }
                    vals.push(best);
                    arg.push(besti);
                }
            }
        }
    }
    (
        Tensor::from_shape_vec(IxDyn(&[n, c, out[0], out[1], out[2]]), vals).expect("pool shape"),
        arg,
    )
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value.as_standard_layout().into_owned(), Op::Leaf)
    }

    /// A new leaf holding a copy of `v`'s value; no gradient flows back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.push(value, Op::Leaf)
    }

    pub fn conv3d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let value = conv3d_forward(self.value(x), self.value(w), stride, pad);
        self.push(value, Op::Conv3d { x, w, stride, pad })
    }

    /// Training-mode batch normalization. Also returns the batch mean and the
    /// unbiased batch variance for running-statistics updates.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> (Var, Vec<f64>, Vec<f64>) {
        let xv = self.value(x);
        let (mean, var, count) = channel_stats(xv);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let xhat = map_channels(xv, |c, v| (v - mean[c]) * inv_std[c]);
        let gv = self.value(gamma).as_slice().expect("gamma").to_vec();
        let bv = self.value(beta).as_slice().expect("beta").to_vec();
        let y = map_channels(&xhat, |c, v| gv[c] * v + bv[c]);
        let unbiased = if count > 1 {
            var.iter().map(|v| v * count as f64 / (count - 1) as f64).collect()
        } else {
            var.clone()
        };
        let out = self.push(y, Op::BatchNorm { x, gamma, beta, xhat, inv_std });
        (out, mean, unbiased)
    }

    /// Per-channel `scale * x + shift` with constant coefficients
    /// (inference-mode batch normalization).
    pub fn channel_affine(&mut self, x: Var, scale: Vec<f64>, shift: Vec<f64>) -> Var {
        let y = map_channels(self.value(x), |c, v| scale[c] * v + shift[c]);
        self.push(y, Op::ChannelAffine { x, scale })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| v.max(0.0));
        self.push(y, Op::Relu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) + self.value(b);
        self.push(y, Op::Add { a, b })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let y = self.value(x) * c;
        self.push(y, Op::Scale { x, c })
    }

    /// 3x3x3 max pooling, stride 2, padding 1.
    pub fn max_pool3d(&mut self, x: Var) -> Var {
        let (y, argmax) = maxpool3d_forward(self.value(x));
        self.push(y, Op::MaxPool3d { x, argmax })
    }

    /// `[N, C, ...] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let sp: usize = xv.shape()[2..].iter().product();
        let xs = xv.as_slice().expect("standard layout");
        let y: Vec<f64> = (0..n * c).map(|i| xs[i * sp..(i + 1) * sp].iter().sum::<f64>() / sp as f64).collect();
        self.push(Tensor::from_shape_vec(IxDyn(&[n, c]), y).expect("gap"), Op::GlobalAvgPool { x })
    }

    /// `[N, C] . w[C] + b[1] -> [N]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w).as_slice().expect("w");
        let bias = self.value(b)[[0]];
        let n = xv.shape()[0];
        let y: Vec<f64> = (0..n)
            .map(|i| xv.slice(s![i, ..]).iter().zip(wv).map(|(a, b)| a * b).sum::<f64>() + bias)
            .collect();
        self.push(Tensor::from_shape_vec(IxDyn(&[n]), y).expect("linear"), Op::Linear { x, w, b })
    }

    /// 1x1x1 convolution of `f` with the single-output kernel `w` (no bias).
    pub fn channel_contract(&mut self, f: Var, w: Var) -> Var {
        let wv = self.value(w).as_slice().expect("w").to_vec();
        let y = channel_contract(self.value(f), &wv);
        self.push(y, Op::ChannelContract { f, w })
    }

    /// Trilinear resize of the trailing three axes to `to`.
    pub fn resize(&mut self, x: Var, to: [usize; 3]) -> Var {
        let shape = self.value(x).shape().to_vec();
        let taps = resize_taps(&shape[shape.len() - 3..], to);
        let y = resize_forward(self.value(x), &taps);
        self.push(y, Op::Resize { x, taps })
    }

    pub fn minmax_normalize(&mut self, x: Var) -> Var {
        let (y, extrema) = minmax_normalize(self.value(x));
        self.push(y, Op::MinMaxNorm { x, extrema })
    }

    pub fn scaled_sigmoid(&mut self, x: Var, alpha: f64, beta: f64) -> Var {
        let y = self.value(x).mapv(|v| scaled_sigmoid(v, alpha, beta));
        self.push(y, Op::ScaledSigmoid { x, alpha })
    }

    /// Per-sample normalized squared error between `t` and the constant `mask`.
    pub fn attention_loss(&mut self, t: Var, mask: Tensor) -> Var {
        let tv = self.value(t).as_standard_layout().into_owned();
        let mask = mask.as_standard_layout().into_owned();
        assert_eq!(tv.shape(), mask.shape(), "attention loss shape mismatch");
        let n = tv.shape()[0];
        let per = tv.len() / n.max(1);
        let (ts, ms) = (tv.as_slice().expect("t"), mask.as_slice().expect("mask"));
        let y: Vec<f64> = (0..n)
            .map(|b| {
                let (num, den) = attention_ratio(&ts[b * per..(b + 1) * per], &ms[b * per..(b + 1) * per]);
                num / den
            })
            .collect();
        self.push(Tensor::from_shape_vec(IxDyn(&[n]), y).expect("loss"), Op::AttentionLoss { t, mask })
    }

    /// Per-sample binary cross entropy on logits `z` (`[N]`).
    pub fn bce_with_logits(&mut self, z: Var, targets: Vec<f64>) -> Var {
        let y = Tensor::from_shape_vec(
            IxDyn(&[targets.len()]),
            self.value(z).iter().zip(&targets).map(|(z, t)| bce_with_logit(*z, *t)).collect(),
        )
        .expect("bce");
        self.push(y, Op::BceWithLogits { z, targets })
    }

    /// Scalar `sum_i weights[i] * x[i]` over the flattened `x`.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), weights.len(), "weighted sum length mismatch");
        let y: f64 = xv.iter().zip(&weights).map(|(a, b)| a * b).sum();
        self.push(Tensor::from_elem(IxDyn(&[]), y), Op::WeightedSum { x, weights })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        self.weighted_sum(x, vec![1.0 / n as f64; n])
    }

    /// Backpropagates from the scalar `root`. Gradients of leaves and of the
    /// nodes in `retain` are returned.
    pub fn backward(&self, root: Var, retain: &[Var]) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::ones(self.nodes[root.0].value.raw_dim()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            if retain.contains(&Var(i)) {
                grads[i] = Some(g.clone());
            }
            match &node.op {
                Op::Leaf => unreachable!("handled above"),
                Op::Conv3d { x, w, stride, pad } => {
                    let (dx, dw) = conv3d_backward(self.value(*x), self.value(*w), &g, *stride, *pad);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                }
                Op::BatchNorm { x, gamma, xhat, inv_std, beta } => {
                    let (n, c) = (g.shape()[0], g.shape()[1]);
                    let sp: usize = g.shape()[2..].iter().product();
                    let m = (n * sp) as f64;
                    let gs = g.as_standard_layout();
                    let gs = gs.as_slice().expect("g");
                    let xh = xhat.as_slice().expect("xhat");
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for b in 0..n {
                        for ch in 0..c {
                            let r = (b * c + ch) * sp..(b * c + ch + 1) * sp;
                            for (gv, xv) in gs[r.clone()].iter().zip(&xh[r]) {
                                dgamma[ch] += gv * xv;
                                dbeta[ch] += gv;
                            }
                        }
                    }
                    let gam = self.value(*gamma).as_slice().expect("gamma");
                    let mut dx = vec![0.0; g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let k = gam[ch] * inv_std[ch] / m;
                            let r = (b * c + ch) * sp..(b * c + ch + 1) * sp;
                            for ((d, gv), xv) in dx[r.clone()].iter_mut().zip(&gs[r.clone()]).zip(&xh[r]) {
                                *d = k * (m * gv - dbeta[ch] - xv * dgamma[ch]);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_shape_vec(g.raw_dim(), dx).expect("dx"));
                    accumulate(&mut grads, *gamma, Tensor::from_shape_vec(IxDyn(&[c]), dgamma).expect("dgamma"));
                    accumulate(&mut grads, *beta, Tensor::from_shape_vec(IxDyn(&[c]), dbeta).expect("dbeta"));
                }
                Op::ChannelAffine { x, scale } => {
                    accumulate(&mut grads, *x, map_channels(&g, |c, v| scale[c] * v));
                }
                Op::Relu { x } => {
                    let mut dx = g;
                    dx.zip_mut_with(self.value(*x), |d, xv| {
                        if *xv <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Scale { x, c } => accumulate(&mut grads, *x, g * *c),
                Op::MaxPool3d { x, argmax } => {
                    let mut dx = Tensor::zeros(self.value(*x).raw_dim());
                    let dxs = dx.as_slice_mut().expect("dx");
                    for (gv, &i) in g.iter().zip(argmax) {
                        dxs[i] += gv;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::GlobalAvgPool { x } => {
                    let xv = self.value(*x);
                    let sp: usize = xv.shape()[2..].iter().product();
                    let gs = g.as_slice().expect("g");
                    let dx: Vec<f64> = (0..xv.len()).map(|i| gs[i / sp] / sp as f64).collect();
                    accumulate(&mut grads, *x, Tensor::from_shape_vec(xv.raw_dim(), dx).expect("dx"));
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let mut dx = Tensor::zeros(xv.raw_dim());
                    let mut dw = Tensor::zeros(wv.raw_dim());
                    for (i, gi) in g.iter().enumerate() {
                        dx.slice_mut(s![i, ..]).scaled_add(*gi, wv);
                        dw.scaled_add(*gi, &xv.slice(s![i, ..]));
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, Tensor::from_elem(IxDyn(&[1]), g.sum()));
                }
                Op::ChannelContract { f, w } => {
                    let fv = self.value(*f);
                    let wv = self.value(*w).as_slice().expect("w");
                    let (n, c) = (fv.shape()[0], fv.shape()[1]);
                    let sp: usize = fv.shape()[2..].iter().product();
                    let fs = fv.as_slice().expect("f");
                    let gs = g.as_standard_layout();
                    let gs = gs.as_slice().expect("g");
                    let mut df = vec![0.0; fv.len()];
                    let mut dw = vec![0.0; c];
                    for b in 0..n {
                        let gb = &gs[b * sp..(b + 1) * sp];
                        for ch in 0..c {
                            let r = (b * c + ch) * sp..(b * c + ch + 1) * sp;
                            for ((d, gv), fval) in df[r.clone()].iter_mut().zip(gb).zip(&fs[r]) {
                                *d = wv[ch] * gv;
                                dw[ch] += gv * fval;
                            }
                        }
                    }
                    accumulate(&mut grads, *f, Tensor::from_shape_vec(fv.raw_dim(), df).expect("df"));
                    accumulate(&mut grads, *w, Tensor::from_shape_vec(IxDyn(&[c]), dw).expect("dw"));
                }
                Op::Resize { x, taps } => accumulate(&mut grads, *x, resize_backward(&g, taps)),
                Op::MinMaxNorm { x, extrema } => {
                    let xv = self.value(*x);
                    let n = xv.shape()[0];
                    let per = xv.len() / n.max(1);
                    let xs = xv.as_standard_layout();
                    let xs = xs.as_slice().expect("x");
                    let gs = g.as_standard_layout();
                    let gs = gs.as_slice().expect("g");
                    let mut dx = vec![0.0; xv.len()];
                    for b in 0..n {
                        let Some((imin, imax, range)) = extrema[b] else { continue };
                        let xb = &xs[b * per..(b + 1) * per];
                        let gb = &gs[b * per..(b + 1) * per];
                        let (lo, hi) = (xb[imin], xb[imax]);
                        let db = &mut dx[b * per..(b + 1) * per];
                        let (mut dmin, mut dmax) = (0.0, 0.0);
                        for ((d, gv), xval) in db.iter_mut().zip(gb).zip(xb) {
                            *d = gv / range;
                            dmin += gv * (xval - hi) / (range * range);
                            dmax -= gv * (xval - lo) / (range * range);
                        }
                        db[imin] += dmin;
                        db[imax] += dmax;
                    }
                    accumulate(&mut grads, *x, Tensor::from_shape_vec(xv.raw_dim(), dx).expect("dx"));
                }
                Op::ScaledSigmoid { x, alpha } => {
                    let mut dx = g;
                    dx.zip_mut_with(&node.value, |d, y| *d *= alpha * y * (1.0 - y));
                    accumulate(&mut grads, *x, dx);
                }
                Op::AttentionLoss { t, mask } => {
                    let tv = self.value(*t).as_standard_layout().into_owned();
                    let n = tv.shape()[0];
                    let per = tv.len() / n.max(1);
                    let (ts, ms) = (tv.as_slice().expect("t"), mask.as_slice().expect("mask"));
                    let mut dt = vec![0.0; tv.len()];
                    for b in 0..n {
                        let r = b * per..(b + 1) * per;
                        let (num, den) = attention_ratio(&ts[r.clone()], &ms[r.clone()]);
                        let gb = g[[b]];
                        for ((d, tval), mval) in dt[r.clone()].iter_mut().zip(&ts[r.clone()]).zip(&ms[r]) {
                            *d = gb * (2.0 * (tval - mval) * den - num) / (den * den);
                        }
                    }
                    accumulate(&mut grads, *t, Tensor::from_shape_vec(tv.raw_dim(), dt).expect("dt"));
                }
                Op::BceWithLogits { z, targets } => {
                    let zv = self.value(*z);
                    let dz: Vec<f64> = zv.iter().zip(targets).zip(g.iter()).map(|((z, t), gv)| gv * (sigmoid(*z) - t)).collect();
                    accumulate(&mut grads, *z, Tensor::from_shape_vec(zv.raw_dim(), dz).expect("dz"));
                }
                Op::WeightedSum { x, weights } => {
                    let gv = g.iter().next().copied().unwrap_or(0.0);
                    let xv = self.value(*x);
                    let dx: Vec<f64> = weights.iter().map(|w| w * gv).collect();
                    accumulate(&mut grads, *x, Tensor::from_shape_vec(xv.raw_dim(), dx).expect("dx"));
                }
            }
        }
        Gradients { grads }
    }
}
