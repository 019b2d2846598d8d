//! Classification and attention objectives.
//!
//! COVID samples are trained with `l_c + lambda * l_ex`; CAP samples with
//! `l_c` alone. Batch values are means: `l_c` over every sample, `l_ex` over
//! the COVID samples of the batch.

use serde::{Deserialize, Serialize};

use crate::autograd::{attention_ratio, bce_with_logit, Tape, Tensor, Var};
use crate::data_model::ClassLabel;
use crate::error::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 0.5;

/// Stable binary cross entropy of `sigmoid(logit)` against `label` (1 = COVID).
pub fn classification_loss(logit: f64, label: ClassLabel) -> f64 {
    bce_with_logit(logit, label.target())
}

/// `sum (T - M)^2 / (sum (T + M) + 1e-8)`.
pub fn attention_loss(t: &[f64], m: &[f64]) -> Result<f64> {
    if t.len() != m.len() {
        return Err(Error::ShapeMismatch(format!(
            "attention map has {} voxels, infection mask {}",
            t.len(),
            m.len()
        )));
    }
    let (num, den) = attention_ratio(t, m);
    Ok(num / den)
}

pub fn total_loss(l_c: f64, l_ex: f64, label: ClassLabel, lambda: f64) -> f64 {
    match label {
        ClassLabel::Covid => l_c + lambda * l_ex,
        ClassLabel::Cap => l_c,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_c: f64,
    /// Absent for CAP samples (and for batches without COVID samples).
    pub l_ex: Option<f64>,
    pub l_total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn new(l_c: f64, l_ex: Option<f64>, lambda: f64) -> Self {
        let l_total = match l_ex {
            Some(e) => l_c + lambda * e,
            None => l_c,
        };
        LossBreakdown { l_c, l_ex, l_total, lambda }
    }

    pub fn for_sample(logit: f64, label: ClassLabel, t: &[f64], m: &[f64], lambda: f64) -> Result<Self> {
        let l_c = classification_loss(logit, label);
        let l_ex = match label {
            ClassLabel::Covid => Some(attention_loss(t, m)?),
            ClassLabel::Cap => None,
        };
        Ok(Self::new(l_c, l_ex, lambda))
    }
}

/// Tape nodes of one batch objective.
pub struct BatchLoss {
    /// Scalar root for backpropagation.
    pub total: Var,
    /// Per-sample `[N]` classification losses.
    pub per_sample_c: Var,
    /// Per-COVID-sample `[N_covid]` attention losses, when any COVID sample exists.
    pub per_sample_ex: Option<Var>,
    pub covid_rows: Vec<usize>,
}

/// Records the batch objective. `attention` is the `[N, D, H, W]` soft mask
/// node; `masks` holds one infection mask per sample (only COVID rows are used).
pub fn record_batch_loss(
    tape: &mut Tape,
    logits: Var,
    attention: Option<Var>,
    labels: &[ClassLabel],
    masks: &[&Tensor],
    lambda: f64,
) -> Result<BatchLoss> {
    let n = labels.len();
    if tape.value(logits).len() != n {
        return Err(Error::ShapeMismatch(format!("{} logits for {n} labels", tape.value(logits).len())));
    }
    let targets: Vec<f64> = labels.iter().map(|l| l.target()).collect();
    let per_c = tape.bce_with_logits(logits, targets);
    let mean_c = tape.mean(per_c);
    let covid_rows: Vec<usize> = labels.iter().enumerate().filter(|(_, l)| l.is_positive()).map(|(i, _)| i).collect();
    let (Some(att), false, true) = (attention, covid_rows.is_empty(), lambda != 0.0) else {
        return Ok(BatchLoss {
            total: mean_c,
            per_sample_c: per_c,
            per_sample_ex: None,
            covid_rows,
        });
    };
    let tshape = tape.value(att).shape().to_vec();
    if masks.len() != n {
        return Err(Error::ShapeMismatch(format!("{} masks for {n} samples", masks.len())));
    }
    // CAP rows keep an all-zero mask and get zero weight in the reduction.
    let mut mask_all = Tensor::zeros(ndarray::IxDyn(&tshape));
    for (i, m) in masks.iter().enumerate() {
        if !labels[i].is_positive() {
            continue;
        }
        if m.shape() != &tshape[1..] {
            return Err(Error::ShapeMismatch(format!(
                "infection mask {:?} vs attention map {:?}",
                m.shape(),
                &tshape[1..]
            )));
        }
        mask_all.index_axis_mut(ndarray::Axis(0), i).assign(m);
    }
    let per_ex = tape.attention_loss(att, mask_all);
    let mut w = vec![0.0; n];
    for &i in &covid_rows {
        w[i] = lambda / covid_rows.len() as f64;
    }
    let ex_term = tape.weighted_sum(per_ex, w);
    let total = tape.add(mean_c, ex_term);
    Ok(BatchLoss {
        total,
        per_sample_c: per_c,
        per_sample_ex: Some(per_ex),
        covid_rows,
    })
}

impl BatchLoss {
    /// Mean classification loss and mean COVID attention loss.
    pub fn means(&self, tape: &Tape) -> (f64, Option<f64>) {
        let c = tape.value(self.per_sample_c);
        let mean_c = c.sum() / c.len() as f64;
        let mean_ex = self.per_sample_ex.map(|v| {
            let e = tape.value(v);
            self.covid_rows.iter().map(|&i| e[[i]]).sum::<f64>() / self.covid_rows.len() as f64
        });
        (mean_c, mean_ex)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn classification_examples() {
        let ln2 = 2f64.ln();
        assert!((classification_loss(0.0, ClassLabel::Covid) - ln2).abs() < 1e-12);
        assert!((classification_loss(0.0, ClassLabel::Cap) - ln2).abs() < 1e-12);
        assert!(classification_loss(20.0, ClassLabel::Covid) < 1e-8);
        assert!((classification_loss(0.5, ClassLabel::Covid) - 0.474077).abs() < 1e-6);
    }

    #[test]
    fn attention_examples() {
        let t = [0.3, 0.0, 1.0];
        assert_eq!(attention_loss(&t, &t).unwrap(), 0.0);
        let n = 1000;
        let ones = vec![1.0; n];
        let zeros = vec![0.0; n];
        let l = attention_loss(&ones, &zeros).unwrap();
        assert!((l - n as f64 / (n as f64 + 1e-8)).abs() < 1e-15);
        let l = attention_loss(&[0.5, 0.0], &[1.0, 0.0]).unwrap();
        assert!((l - 0.25 / (1.5 + 1e-8)).abs() < 1e-9);
        assert!((l - 1.0 / 6.0).abs() < 2e-9);
        assert!(attention_loss(&[0.0], &[0.0, 1.0]).is_err());
        assert_eq!(attention_loss(&zeros, &zeros).unwrap(), 0.0);
    }

    #[test]
    fn total_examples() {
        assert!((total_loss(0.7, 0.2, ClassLabel::Covid, 0.5) - 0.8).abs() < 1e-15);
        assert_eq!(total_loss(0.7, 0.2, ClassLabel::Cap, 0.5), 0.7);
        assert_eq!(total_loss(0.3, 0.9, ClassLabel::Covid, 0.0), 0.3);
        let b = LossBreakdown::new(0.7, Some(0.2), 0.5);
        assert!((b.l_total - 0.8).abs() < 1e-15);
        assert_eq!(LossBreakdown::new(0.7, None, 0.5).l_total, 0.7);
    }

    #[test]
    fn batch_loss_reproduces_per_sample_values() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::from_shape_vec(ndarray::IxDyn(&[3]), vec![0.5, -1.0, 2.0]).unwrap());
        let t = Tensor::from_shape_fn(ndarray::IxDyn(&[3, 1, 2, 2]), |i| (i[0] + i[2] + 2 * i[3]) as f64 / 6.0);
        let att = tape.leaf(t.clone());
        let m0 = Tensor::from_shape_vec(ndarray::IxDyn(&[1, 2, 2]), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m1 = Tensor::zeros(ndarray::IxDyn(&[1, 2, 2]));
        let labels = [ClassLabel::Covid, ClassLabel::Cap, ClassLabel::Covid];
        let b = record_batch_loss(&mut tape, logits, Some(att), &labels, &[&m0, &m1, &m0], 0.5).unwrap();
        let mut expect_c = 0.0;
        let mut expect_ex = 0.0;
        for (i, (z, l)) in [0.5, -1.0, 2.0].iter().zip(labels).enumerate() {
            expect_c += classification_loss(*z, l) / 3.0;
            if l.is_positive() {
                let ti: Vec<f64> = t.index_axis(ndarray::Axis(0), i).iter().copied().collect();
                let mi: Vec<f64> = m0.iter().copied().collect();
                expect_ex += attention_loss(&ti, &mi).unwrap() / 2.0;
            }
        }
        let total = tape.value(b.total)[[]];
        assert!((total - (expect_c + 0.5 * expect_ex)).abs() < 1e-12);
        let (mc, mex) = b.means(&tape);
        assert!((mc - expect_c).abs() < 1e-12 && (mex.unwrap() - expect_ex).abs() < 1e-12);
    }

    #[test]
    fn cap_only_batch_has_no_attention_term() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(ndarray::IxDyn(&[2])));
        let att = tape.leaf(Tensor::zeros(ndarray::IxDyn(&[2, 1, 1, 1])));
        let m = Tensor::zeros(ndarray::IxDyn(&[1, 1, 1]));
        let b = record_batch_loss(&mut tape, logits, Some(att), &[ClassLabel::Cap; 2], &[&m, &m], 0.5).unwrap();
        assert!(b.per_sample_ex.is_none());
        assert!((tape.value(b.total)[[]] - 2f64.ln()).abs() < 1e-12);
    }

    fn unit_pairs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..64).prop_flat_map(|n| (prop::collection::vec(0.0..=1.0f64, n), prop::collection::vec(prop::bool::ANY, n)))
            .prop_map(|(t, m)| (t, m.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect()))
    }

    proptest! {
        #[test]
        fn attention_loss_in_unit_interval((t, m) in unit_pairs()) {
            let l = attention_loss(&t, &m).unwrap();
            prop_assert!((0.0..=1.0).contains(&l));
        }

        #[test]
        fn attention_loss_zero_iff_equal((t, m) in unit_pairs()) {
            let l = attention_loss(&t, &m).unwrap();
            let equal = t.iter().zip(&m).all(|(a, b)| a == b);
            prop_assert_eq!(l == 0.0, equal);
        }

        #[test]
        fn classification_loss_is_convex(z in -30.0..30.0f64, h in 1e-3..1.0f64, pos in prop::bool::ANY) {
            let label = if pos { ClassLabel::Covid } else { ClassLabel::Cap };
            let f = |x: f64| classification_loss(x, label);
            prop_assert!(f(z + h) + f(z - h) - 2.0 * f(z) >= -1e-12);
            prop_assert!(f(z) >= 0.0);
        }
    }
}
