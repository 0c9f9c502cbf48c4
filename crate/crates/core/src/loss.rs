//! Mask-aware training objectives: BCE, soft Dice, their sum, and the
//! gated total with per-stream auxiliary terms.

use crate::error::{Error, Result};
use crate::model::StreamOutputs;
use crate::nn::Mask;
use crate::tensor::{Element, Tensor};

/// Predictions are clamped into [BCE_CLAMP, 1 - BCE_CLAMP] before the
/// logarithm.
pub const BCE_CLAMP: f64 = 1e-7;
/// Default smoothing constant of the soft Dice term.
pub const DICE_SMOOTH: f64 = 1.0;

/// Scalar components of one loss evaluation. `total` stays connected to
/// the graph for backpropagation; the numeric fields are for reporting.
#[derive(Debug)]
pub struct LossBreakdown<T: Element> {
    pub total: Tensor<T>,
    pub l_g: f64,
    pub l_it: f64,
    pub l_t: f64,
    pub bce_g: f64,
    pub dice_g: f64,
    pub bce_it: f64,
    pub dice_it: f64,
    pub bce_t: f64,
    pub dice_t: f64,
}

impl<T: Element> LossBreakdown<T> {
    pub fn total_value(&self) -> f64 {
        self.total.data()[0].to_f64()
    }
}

fn check_inputs<T: Element>(y_pred: &Tensor<T>, y_true: &Tensor<T>, mask: &Mask) -> Result<()> {
    if y_pred.shape() != y_true.shape()
        || y_pred.rank() != 2
        || y_pred.shape() != [mask.rows(), mask.cols()]
    {
        return Err(Error::Contract(format!(
            "loss inputs disagree: pred {:?}, true {:?}, mask {}x{}",
            y_pred.shape(),
            y_true.shape(),
            mask.rows(),
            mask.cols()
        )));
    }
    if mask.count_valid() == 0 {
        return Err(Error::Contract("loss over an empty mask (no valid slots)".into()));
    }
    Ok(())
}

/// Binary cross-entropy, averaged over valid slots.
pub fn bce<T: Element>(y_pred: &Tensor<T>, y_true: &Tensor<T>, mask: &Mask) -> Result<Tensor<T>> {
    check_inputs(y_pred, y_true, mask)?;
    let n_valid = mask.count_valid() as f64;
    let p = y_pred.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)?;
    let pos = y_true.mul(&p.log()?)?;
    let neg = y_true.affine(-1.0, 1.0)?.mul(&p.affine(-1.0, 1.0)?.log()?)?;
    pos.add(&neg)?
        .mul(&mask.to_tensor())?
        .reduce_sum(None)?
        .affine(-1.0 / n_valid, 0.0)
}

/// Soft Dice: per item `1 - (2*sum(p*y) + smooth) / (sum(p) + sum(y) + smooth)`
/// over valid slots, averaged over the batch.
pub fn dice<T: Element>(
    y_pred: &Tensor<T>,
    y_true: &Tensor<T>,
    mask: &Mask,
    smooth: f64,
) -> Result<Tensor<T>> {
    check_inputs(y_pred, y_true, mask)?;
    if smooth <= 0.0 {
        return Err(Error::Contract(format!("dice smoothing must be positive, got {smooth}")));
    }
    let m = mask.to_tensor::<T>();
    let pm = y_pred.mul(&m)?;
    let ym = y_true.mul(&m)?;
    let numer = pm.mul(&ym)?.reduce_sum(Some(1))?.affine(2.0, smooth)?;
    let denom = pm.reduce_sum(Some(1))?.add(&ym.reduce_sum(Some(1))?)?.affine(1.0, smooth)?;
    numer.div(&denom)?.affine(-1.0, 1.0)?.reduce_mean(None)
}

/// BCE plus soft Dice.
pub fn bce_dice<T: Element>(
    y_pred: &Tensor<T>,
    y_true: &Tensor<T>,
    mask: &Mask,
    smooth: f64,
) -> Result<Tensor<T>> {
    bce(y_pred, y_true, mask)?.add(&dice(y_pred, y_true, mask, smooth)?)
}

fn component<T: Element>(
    y_pred: &Tensor<T>,
    y_true: &Tensor<T>,
    mask: &Mask,
    smooth: f64,
) -> Result<(Tensor<T>, f64, f64)> {
    let b = bce(y_pred, y_true, mask)?;
    let d = dice(y_pred, y_true, mask, smooth)?;
    let bval = b.data()[0].to_f64();
    let dval = d.data()[0].to_f64();
    Ok((b.add(&d)?, bval, dval))
}

/// Total objective of the gated model: BCE-Dice on the fused output
/// plus one auxiliary BCE-Dice term per stream, equally weighted.
pub fn total_loss<T: Element>(
    outputs: &StreamOutputs<T>,
    y_true: &Tensor<T>,
    mask: &Mask,
    smooth: f64,
) -> Result<LossBreakdown<T>> {
    let (lg, bce_g, dice_g) = component(&outputs.o_final, y_true, mask, smooth)?;
    let (lit, bce_it, dice_it) = component(&outputs.o_it, y_true, mask, smooth)?;
    let (lt, bce_t, dice_t) = component(&outputs.o_t, y_true, mask, smooth)?;
    let total = lg.add(&lit)?.add(&lt)?;
    Ok(LossBreakdown {
        total,
        l_g: bce_g + dice_g,
        l_it: bce_it + dice_it,
        l_t: bce_t + dice_t,
        bce_g,
        dice_g,
        bce_it,
        dice_it,
        bce_t,
        dice_t,
    })
}

/// Pre-training objective: per-stream BCE-Dice against relevant (1) vs
/// injected (0) labels; no gated term.
pub fn pretrain_loss<T: Element>(
    o_it: &Tensor<T>,
    o_t: &Tensor<T>,
    y_relevant: &Tensor<T>,
    mask: &Mask,
    smooth: f64,
) -> Result<LossBreakdown<T>> {
    let (lit, bce_it, dice_it) = component(o_it, y_relevant, mask, smooth)?;
    let (lt, bce_t, dice_t) = component(o_t, y_relevant, mask, smooth)?;
    let total = lit.add(&lt)?;
    Ok(LossBreakdown {
        total,
        l_g: 0.0,
        l_it: bce_it + dice_it,
        l_t: bce_t + dice_t,
        bce_g: 0.0,
        dice_g: 0.0,
        bce_it,
        dice_it,
        bce_t,
        dice_t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t2(data: Vec<f64>, bs: usize, l: usize) -> Tensor<f64> {
        Tensor::new(data, &[bs, l]).unwrap()
    }

    #[test]
    fn bce_at_half_is_ln_two() {
        let p = t2(vec![0.5], 1, 1);
        let y = t2(vec![1.0], 1, 1);
        let v = bce(&p, &y, &Mask::all_valid(1, 1)).unwrap().scalar_value().unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-9, "{v}");
    }

    #[test]
    fn bce_saturated_correct_prediction_is_tiny() {
        let p = t2(vec![1.0, 0.0, 1.0], 1, 3);
        let y = t2(vec![1.0, 0.0, 1.0], 1, 3);
        let v = bce(&p, &y, &Mask::all_valid(1, 3)).unwrap().scalar_value().unwrap();
        assert!(v <= 2e-7, "{v}");
    }

    #[test]
    fn bce_ignores_padded_slots_bit_exactly() {
        let mask = Mask::new(vec![true, true, false], 1, 3).unwrap();
        let y = t2(vec![1.0, 0.0, 0.0], 1, 3);
        let a = bce(&t2(vec![0.8, 0.3, 0.9], 1, 3), &y, &mask).unwrap();
        let b = bce(&t2(vec![0.8, 0.3, 0.1], 1, 3), &y, &mask).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn bce_empty_mask_is_contract_error() {
        let p = t2(vec![0.5], 1, 1);
        let y = t2(vec![1.0], 1, 1);
        let mask = Mask::new(vec![false], 1, 1).unwrap();
        assert!(matches!(bce(&p, &y, &mask), Err(Error::Contract(_))));
    }

    #[test]
    fn dice_perfect_overlap_is_zero() {
        let p = t2(vec![1.0, 0.0, 1.0], 1, 3);
        let y = p.detached();
        let v = dice(&p, &y, &Mask::all_valid(1, 3), 1.0).unwrap().scalar_value().unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn dice_disjoint_with_smoothing_matches_hand_value() {
        // 1 - (0 + 1) / (1 + 1 + 1) = 2/3
        let p = t2(vec![1.0, 0.0], 1, 2);
        let y = t2(vec![0.0, 1.0], 1, 2);
        let v = dice(&p, &y, &Mask::all_valid(1, 2), 1.0).unwrap().scalar_value().unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-9, "{v}");
    }

    #[test]
    fn dice_empty_empty_convention_is_zero() {
        let p = t2(vec![0.0, 0.0], 1, 2);
        let y = t2(vec![0.0, 0.0], 1, 2);
        let v = dice(&p, &y, &Mask::all_valid(1, 2), 1.0).unwrap().scalar_value().unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn bce_dice_is_bitwise_sum_of_parts() {
        let p = t2(vec![0.7, 0.2, 0.9, 0.4], 2, 2);
        let y = t2(vec![1.0, 0.0, 1.0, 1.0], 2, 2);
        let mask = Mask::all_valid(2, 2);
        let combined = bce_dice(&p, &y, &mask, 1.0).unwrap().scalar_value().unwrap();
        let b = bce(&p, &y, &mask).unwrap().scalar_value().unwrap();
        let d = dice(&p, &y, &mask, 1.0).unwrap().scalar_value().unwrap();
        assert_eq!(combined, b + d);
    }

    #[test]
    fn gradients_of_losses_pass_finite_differences() {
        use crate::tensor::gradcheck::finite_difference_check;
        use std::collections::BTreeMap;
        let y = t2(vec![1.0, 0.0, 1.0, 0.0], 2, 2);
        let mask = Mask::new(vec![true, true, true, false], 2, 2).unwrap();
        let mut params = BTreeMap::new();
        // Pre-sigmoid scores so predictions stay inside (0, 1).
        params.insert(
            "z".to_string(),
            Tensor::parameter("z", vec![0.3, -0.8, 1.2, 0.1], &[2, 2]).unwrap(),
        );
        let report = finite_difference_check(
            |p| {
                let pred = p["z"].sigmoid()?;
                bce_dice(&pred, &y, &mask, 1.0)
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "{report}");
    }

    proptest! {
        #[test]
        fn dice_stays_in_unit_interval(
            p in proptest::collection::vec(0.0f64..1.0, 6),
            y in proptest::collection::vec(proptest::bool::ANY, 6),
        ) {
            let yp = t2(p, 2, 3);
            let yt = t2(y.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(), 2, 3);
            let v = dice(&yp, &yt, &Mask::all_valid(2, 3), 1.0).unwrap().scalar_value().unwrap();
            prop_assert!((0.0..=1.0).contains(&v), "dice {v}");
        }

        #[test]
        fn dice_is_permutation_symmetric(
            p in proptest::collection::vec(0.01f64..0.99, 5),
            y in proptest::collection::vec(proptest::bool::ANY, 5),
        ) {
            let yt: Vec<f64> = y.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            let v1 = dice(&t2(p.clone(), 1, 5), &t2(yt.clone(), 1, 5), &Mask::all_valid(1, 5), 1.0)
                .unwrap().scalar_value().unwrap();
            let perm = [4usize, 2, 0, 3, 1];
            let pp: Vec<f64> = perm.iter().map(|&i| p[i]).collect();
            let yp: Vec<f64> = perm.iter().map(|&i| yt[i]).collect();
            let v2 = dice(&t2(pp, 1, 5), &t2(yp, 1, 5), &Mask::all_valid(1, 5), 1.0)
                .unwrap().scalar_value().unwrap();
            prop_assert!((v1 - v2).abs() < 1e-12);
        }

        #[test]
        fn bce_decreases_as_prediction_approaches_label(
            p0 in 0.05f64..0.95,
            step in 0.001f64..0.04,
        ) {
            let y = t2(vec![1.0], 1, 1);
            let mask = Mask::all_valid(1, 1);
            let before = bce(&t2(vec![p0], 1, 1), &y, &mask).unwrap().scalar_value().unwrap();
            let after = bce(&t2(vec![p0 + step], 1, 1), &y, &mask).unwrap().scalar_value().unwrap();
            prop_assert!(after <= before);
        }
    }
}
