//! Separable 1D interpolation along array axes.
//!
//! Output sample `i` along an axis sits at input coordinate
//! `(i + 0.5) * step - 0.5` (half-voxel centres), clamped to the valid range.
//! Trilinear resampling is three linear passes; the adjoint pass scatters
//! gradients back through the same taps.

use ndarray::{ArrayD, ArrayViewD, Axis, Zip};
use num_traits::Float;

#[derive(Debug, Clone, PartialEq)]
pub struct AxisTaps {
    pub in_len: usize,
    /// `(lower index, upper index, weight of upper)` per output sample.
    taps: Vec<(usize, usize, f64)>,
}

impl AxisTaps {
    pub fn linear(in_len: usize, out_len: usize, step: f64) -> Self {
        let max = (in_len - 1) as f64;
        let taps = (0..out_len)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * step - 0.5).clamp(0.0, max);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(in_len - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect();
        AxisTaps { in_len, taps }
    }

    pub fn nearest(in_len: usize, out_len: usize, step: f64) -> Self {
        let taps = (0..out_len)
            .map(|i| {
                let idx = (((i as f64 + 0.5) * step).floor() as usize).min(in_len - 1);
                (idx, idx, 0.0)
            })
            .collect();
        AxisTaps { in_len, taps }
    }

    pub fn out_len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_identity(&self) -> bool {
        self.in_len == self.taps.len() && self.taps.iter().enumerate().all(|(i, &(lo, _, f))| lo == i && f == 0.0)
    }
}

pub fn apply_axis<T: Float + 'static>(x: ArrayViewD<'_, T>, axis: usize, taps: &AxisTaps) -> ArrayD<T> {
    debug_assert_eq!(x.shape()[axis], taps.in_len);
    let mut shape = x.shape().to_vec();
    shape[axis] = taps.out_len();
    let mut out = ArrayD::<T>::zeros(shape);
    let weights: Vec<(usize, usize, T, T)> = taps
        .taps
        .iter()
        .map(|&(lo, hi, f)| (lo, hi, T::from(1.0 - f).unwrap(), T::from(f).unwrap()))
        .collect();
    Zip::from(out.lanes_mut(Axis(axis)))
        .and(x.lanes(Axis(axis)))
        .for_each(|mut o, i| {
            for (k, &(lo, hi, wl, wh)) in weights.iter().enumerate() {
                o[k] = if lo == hi { i[lo] } else { i[lo] * wl + i[hi] * wh };
            }
        });
    out
}

/// Transpose of [`apply_axis`]: maps an output-shaped gradient to the input shape.
pub fn apply_axis_adjoint(g: ArrayViewD<'_, f64>, axis: usize, taps: &AxisTaps) -> ArrayD<f64> {
    let mut shape = g.shape().to_vec();
    shape[axis] = taps.in_len;
    let mut out = ArrayD::<f64>::zeros(shape);
    Zip::from(out.lanes_mut(Axis(axis)))
        .and(g.lanes(Axis(axis)))
        .for_each(|mut o, gi| {
            for (k, &(lo, hi, f)) in taps.taps.iter().enumerate() {
                if lo == hi {
                    o[lo] += gi[k];
                } else {
                    o[lo] += gi[k] * (1.0 - f);
                    o[hi] += gi[k] * f;
                }
            }
        });
    out
}

/// Applies one set of taps per listed axis, in order.
pub fn resample_axes<T: Float + 'static>(x: ArrayViewD<'_, T>, axes: &[(usize, &AxisTaps)]) -> ArrayD<T> {
    let mut cur = x.to_owned();
    for &(axis, taps) in axes {
        if taps.is_identity() {
            continue;
        }
        cur = apply_axis(cur.view(), axis, taps);
    }
    cur
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn identity_step_is_identity() {
        let t = AxisTaps::linear(7, 7, 1.0);
        assert!(t.is_identity());
        let n = AxisTaps::nearest(7, 7, 1.0);
        assert!(n.is_identity());
    }

    #[test]
    fn constant_is_preserved() {
        let x = ArrayD::from_elem(IxDyn(&[5, 3]), 2.5f64);
        let t = AxisTaps::linear(5, 11, 5.0 / 11.0);
        let y = apply_axis(x.view(), 0, &t);
        assert!(y.iter().all(|v| (*v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn adjoint_matches_dot_product() {
        let x = ArrayD::from_shape_fn(IxDyn(&[4, 3]), |i| (i[0] * 3 + i[1]) as f64 * 0.37 - 1.0);
        let t = AxisTaps::linear(4, 9, 4.0 / 9.0);
        let y = apply_axis(x.view(), 0, &t);
        let g = ArrayD::from_shape_fn(IxDyn(&[9, 3]), |i| ((i[0] * 7 + i[1] * 3) % 5) as f64 - 2.0);
        let lhs: f64 = (&y * &g).sum();
        let back = apply_axis_adjoint(g.view(), 0, &t);
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
