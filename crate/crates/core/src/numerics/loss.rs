//! Loss functions, registered on the tape as fused ops.

use super::{lit, Scalar, Tensor, TensorError, TensorResult};
use ndarray::{ArrayD, Axis, IxDyn};

/// Mean cross-entropy over the labelled positions of a `[positions, vocab]`
/// logit matrix. Positions labelled `None` contribute nothing to the value
/// or the gradient.
pub fn cross_entropy_masked<S: Scalar>(
    logits: &Tensor<S>,
    labels: &[Option<usize>],
) -> TensorResult<Tensor<S>> {
    let lv = logits.value();
    if lv.ndim() != 2 {
        return Err(TensorError::Invalid(format!(
            "cross_entropy_masked expects [positions, vocab] logits, got {:?}",
            lv.shape()
        )));
    }
    let (positions, vocab) = (lv.shape()[0], lv.shape()[1]);
    if labels.len() != positions {
        return Err(TensorError::ShapeMismatch {
            op: "cross_entropy_masked",
            left: vec![positions, vocab],
            right: vec![labels.len()],
        });
    }
    let selected: Vec<(usize, usize)> = labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.map(|id| (i, id)))
        .collect();
    if selected.is_empty() {
        return Err(TensorError::Invalid(
            "cross_entropy_masked: every label is ignored".into(),
        ));
    }
    for &(_, id) in &selected {
        if id >= vocab {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy_masked",
                index: id,
                extent: vocab,
            });
        }
    }

    // softmax rows are saved for the backward rule
    let mut probs = ArrayD::<S>::zeros(IxDyn(&[positions, vocab]));
    let mut total = S::zero();
    for &(row, label) in &selected {
        let lane = lv.index_axis(Axis(0), row);
        let max = lane.iter().copied().fold(S::neg_infinity(), S::max);
        let mut denom = S::zero();
        for &v in lane.iter() {
            denom = denom + (v - max).exp();
        }
        let log_denom = denom.ln() + max;
        total = total + (log_denom - lane[label]);
        let mut prow = probs.index_axis_mut(Axis(0), row);
        for (p, &v) in prow.iter_mut().zip(lane.iter()) {
            *p = (v - log_denom).exp();
        }
    }
    drop(lv);
    let count = lit::<S>(selected.len() as f64);
    let value = ArrayD::from_elem(IxDyn(&[]), total / count);
    Ok(Tensor::from_op(
        value,
        vec![logits.clone()],
        Box::new(move |g| {
            let gv = *g.iter().next().expect("scalar grad");
            let mut dx = ArrayD::<S>::zeros(IxDyn(&[positions, vocab]));
            let inv = gv / count;
            for &(row, label) in &selected {
                let prow = probs.index_axis(Axis(0), row);
                let mut drow = dx.index_axis_mut(Axis(0), row);
                for (d, &p) in drow.iter_mut().zip(prow.iter()) {
                    *d = p * inv;
                }
                drow[label] = drow[label] - inv;
            }
            vec![Some(dx)]
        }),
    ))
}

/// Mean binary cross-entropy from logits over a rank-1 tensor, in the
/// log-sum-exp form that stays finite for |logit| up to well past 80.
pub fn bce_with_logits<S: Scalar>(logits: &Tensor<S>, targets: &[S]) -> TensorResult<Tensor<S>> {
    let lv = logits.value();
    if lv.ndim() != 1 {
        return Err(TensorError::Invalid(format!(
            "bce_with_logits expects rank-1 logits, got {:?}",
            lv.shape()
        )));
    }
    if lv.len() != targets.len() {
        return Err(TensorError::ShapeMismatch {
            op: "bce_with_logits",
            left: lv.shape().to_vec(),
            right: vec![targets.len()],
        });
    }
    if targets.is_empty() {
        return Err(TensorError::Invalid("bce_with_logits: empty targets".into()));
    }
    for &t in targets {
        if t != S::zero() && t != S::one() {
            return Err(TensorError::Invalid(format!(
                "bce_with_logits: target {t} is not 0 or 1"
            )));
        }
    }
    // loss_i = max(z, 0) - z*t + ln(1 + exp(-|z|))
    let mut total = S::zero();
    for (&z, &t) in lv.iter().zip(targets.iter()) {
        let pos = if z > S::zero() { z } else { S::zero() };
        total = total + pos - z * t + (S::one() + (-z.abs()).exp()).ln();
    }
    let n = lit::<S>(targets.len() as f64);
    let value = ArrayD::from_elem(IxDyn(&[]), total / n);
    let targets_owned: Vec<S> = targets.to_vec();
    let lc = logits.clone();
    drop(lv);
    Ok(Tensor::from_op(
        value,
        vec![logits.clone()],
        Box::new(move |g| {
            let gv = *g.iter().next().expect("scalar grad");
            let lv = lc.value();
            let inv = gv / n;
            // d/dz = sigmoid(z) - t, computed without overflow
            let dx_vec: Vec<S> = lv
                .iter()
                .zip(targets_owned.iter())
                .map(|(&z, &t)| {
                    let s = if z >= S::zero() {
                        S::one() / (S::one() + (-z).exp())
                    } else {
                        let e = z.exp();
                        e / (S::one() + e)
                    };
                    (s - t) * inv
                })
                .collect();
            let dx = ArrayD::from_shape_vec(lv.raw_dim(), dx_vec).expect("same length");
            vec![Some(dx)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::backward;

    const LN_2: f32 = std::f32::consts::LN_2;

    #[test]
    fn uniform_two_way_cross_entropy_is_ln_two() {
        let logits = Tensor::from_vec(&[1, 2], vec![0.0_f32, 0.0]).unwrap();
        let loss = cross_entropy_masked(&logits, &[Some(0)]).unwrap();
        assert!((loss.item() - LN_2).abs() < 1e-6);
    }

    #[test]
    fn ignored_positions_contribute_nothing() {
        let single = Tensor::from_vec(&[1, 3], vec![0.4_f32, -1.0, 2.2]).unwrap();
        let double = Tensor::from_vec(&[2, 3], vec![0.4_f32, -1.0, 2.2, 9.0, -9.0, 3.0]).unwrap();
        let a = cross_entropy_masked(&single, &[Some(2)]).unwrap();
        let b = cross_entropy_masked(&double, &[Some(2), None]).unwrap();
        assert_eq!(a.item(), b.item());
        // and no gradient reaches the ignored row
        let double = Tensor::param(double.value().clone());
        let loss = cross_entropy_masked(&double, &[Some(2), None]).unwrap();
        backward(&loss).unwrap();
        let g = double.grad().unwrap();
        assert!(g.index_axis(Axis(0), 1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn all_ignored_is_an_error() {
        let logits = Tensor::zeros(&[2, 3]);
        assert!(cross_entropy_masked::<f32>(&logits, &[None, None]).is_err());
    }

    #[test]
    fn cross_entropy_matches_scalar_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..28).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels: Vec<Option<usize>> = (0..4).map(|i| Some((i * 3) % 7)).collect();
        let logits = Tensor::from_vec(&[4, 7], data.clone()).unwrap();
        let loss = cross_entropy_masked(&logits, &labels).unwrap();

        // independent scalar-loop computation
        let mut expected = 0.0_f64;
        for (row, label) in labels.iter().enumerate() {
            let label = label.unwrap();
            let row_vals = &data[row * 7..(row + 1) * 7];
            let denom: f64 = row_vals.iter().map(|v| v.exp()).sum();
            expected += -(row_vals[label].exp() / denom).ln();
        }
        expected /= 4.0;
        assert!((loss.item() - expected).abs() < 1e-6);
    }

    #[test]
    fn bce_logit_zero_target_one_is_ln_two() {
        let logits = Tensor::from_vec(&[1], vec![0.0_f32]).unwrap();
        let loss = bce_with_logits(&logits, &[1.0]).unwrap();
        assert!((loss.item() - LN_2).abs() < 1e-6);
    }

    #[test]
    fn bce_survives_huge_logits() {
        let logits = Tensor::from_vec(&[2], vec![80.0_f32, -80.0]).unwrap();
        let loss = bce_with_logits(&logits, &[1.0, 0.0]).unwrap();
        assert!(loss.item().is_finite());
        assert!(loss.item() < 1e-6);
    }

    #[test]
    fn bce_rejects_non_binary_targets() {
        let logits = Tensor::from_vec(&[1], vec![0.3_f32]).unwrap();
        assert!(bce_with_logits(&logits, &[0.5]).is_err());
    }

    #[test]
    fn bce_matches_naive_high_precision_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let zs: Vec<f64> = (0..9).map(|_| rng.random_range(-4.0..4.0)).collect();
        let ts: Vec<f64> = (0..9).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let logits = Tensor::from_vec(&[9], zs.clone()).unwrap();
        let loss = bce_with_logits(&logits, &ts).unwrap();
        let expected: f64 = zs
            .iter()
            .zip(&ts)
            .map(|(&z, &t)| {
                let p = 1.0 / (1.0 + (-z).exp());
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 9.0;
        assert!((loss.item() - expected).abs() < 1e-6);
    }

    use ndarray::Axis;
}
