//! Thresholding, precision/recall/F1, and the outlier pick rate.

use std::collections::BTreeSet;

use crate::data::{pad_and_batch, TagVocabulary, TaggedItem};
use crate::error::{Error, Result};
use crate::model::{run_model, ModelKind};
use crate::nn::{Mask, Mode, ModelConfig, ParamStore};
use crate::rng::rng_for;
use crate::tad::inject_outliers;
use crate::tensor::{Element, Tensor};

/// Precision/recall/F1 in micro (pooled counts) and per-item macro
/// form, plus the outlier item rate when outliers were injected.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Percentage of outlier-bearing items with at least one outlier
    /// predicted important.
    pub outlier_item_rate: Option<f64>,
}

impl Metrics {
    pub fn csv_header() -> &'static str {
        "run_id,split,micro_precision,micro_recall,micro_f1,macro_precision,macro_recall,macro_f1,outlier_item_rate"
    }

    pub fn csv_row(&self, run_id: &str, split: &str) -> String {
        let outlier = self.outlier_item_rate.map_or(String::new(), |v| format!("{v}"));
        format!(
            "{run_id},{split},{},{},{},{},{},{},{outlier}",
            self.micro_precision,
            self.micro_recall,
            self.micro_f1,
            self.macro_precision,
            self.macro_recall,
            self.macro_f1,
        )
    }
}

fn f1_of(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Thresholds scores into decisions: 1 iff score >= threshold. Padded
/// slots always decide 0.
pub fn binarize<T: Element>(scores: &Tensor<T>, threshold: f64, mask: &Mask) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&threshold) || threshold == 0.0 {
        return Err(Error::Config(format!("threshold {threshold} outside (0, 1)")));
    }
    if scores.shape() != [mask.rows(), mask.cols()] {
        return Err(Error::Contract(format!(
            "scores {:?} do not match mask {}x{}",
            scores.shape(),
            mask.rows(),
            mask.cols()
        )));
    }
    let t = T::from_f64(threshold);
    Ok(scores
        .data()
        .iter()
        .zip(mask.as_slice())
        .map(|(&s, &valid)| valid && s >= t)
        .collect())
}

/// Micro and per-item-macro precision/recall/F1 over valid slots.
pub fn prf1(pred: &[bool], truth: &[bool], mask: &Mask) -> Result<Metrics> {
    let n = mask.rows() * mask.cols();
    if pred.len() != n || truth.len() != n {
        return Err(Error::Contract(format!(
            "predictions ({}) and truth ({}) must both cover {n} slots",
            pred.len(),
            truth.len()
        )));
    }
    if mask.count_valid() == 0 {
        return Err(Error::Contract("metrics over an empty mask (no valid slots)".into()));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    let mut macro_p = 0.0;
    let mut macro_r = 0.0;
    let mut macro_f = 0.0;
    let mut rows_counted = 0usize;
    for r in 0..mask.rows() {
        let (mut itp, mut ifp, mut ifn) = (0usize, 0usize, 0usize);
        let mut any_valid = false;
        for c in 0..mask.cols() {
            if !mask.get(r, c) {
                continue;
            }
            any_valid = true;
            let i = r * mask.cols() + c;
            match (pred[i], truth[i]) {
                (true, true) => itp += 1,
                (true, false) => ifp += 1,
                (false, true) => ifn += 1,
                (false, false) => {}
            }
        }
        if !any_valid {
            continue;
        }
        rows_counted += 1;
        tp += itp;
        fp += ifp;
        fn_ += ifn;
        // Convention for degenerate items: an empty-truth item predicted
        // empty is perfect; otherwise zero-denominator terms score 0.
        let (ip, ir, if1) = if itp + ifp + ifn == 0 {
            (1.0, 1.0, 1.0)
        } else {
            let ip = if itp + ifp > 0 { itp as f64 / (itp + ifp) as f64 } else { 0.0 };
            let ir = if itp + ifn > 0 { itp as f64 / (itp + ifn) as f64 } else { 0.0 };
            (ip, ir, f1_of(ip, ir))
        };
        macro_p += ip;
        macro_r += ir;
        macro_f += if1;
    }
    let micro_precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let micro_recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    Ok(Metrics {
        micro_precision,
        micro_recall,
        micro_f1: f1_of(micro_precision, micro_recall),
        macro_precision: macro_p / rows_counted as f64,
        macro_recall: macro_r / rows_counted as f64,
        macro_f1: macro_f / rows_counted as f64,
        outlier_item_rate: None,
    })
}

/// Percentage of outlier-bearing items with at least one injected slot
/// predicted important. `flags[r]` holds the slot indices of item `r`'s
/// injected tags.
pub fn outlier_pick_rate(pred: &[bool], flags: &[Vec<usize>], mask: &Mask) -> Result<f64> {
    if flags.len() != mask.rows() || pred.len() != mask.rows() * mask.cols() {
        return Err(Error::Contract(format!(
            "outlier flags for {} items do not match {} mask rows",
            flags.len(),
            mask.rows()
        )));
    }
    let bearing = flags.iter().filter(|f| !f.is_empty()).count();
    if bearing == 0 {
        return Err(Error::Contract("no items contain injected outliers".into()));
    }
    let mut affected = 0usize;
    for (r, slots) in flags.iter().enumerate() {
        if slots.is_empty() {
            continue;
        }
        if slots.iter().any(|&c| c < mask.cols() && pred[r * mask.cols() + c]) {
            affected += 1;
        }
    }
    Ok(100.0 * affected as f64 / bearing as f64)
}
