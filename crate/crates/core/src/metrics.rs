//! Binary precision/recall/F1 with "conduct retrieval" as the positive class.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Precision is `None` with no predicted positives. Recall and F1 are `None`
/// when the gold labels contain no positives; F1 is then undefined rather
/// than zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BinaryScores {
    pub confusion: Confusion,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

pub fn skip_f1(predicted_conduct: &[bool], gold_conduct: &[bool]) -> Result<BinaryScores> {
    if predicted_conduct.len() != gold_conduct.len() {
        return Err(Error::validation(format!(
            "{} predictions for {} gold labels",
            predicted_conduct.len(),
            gold_conduct.len()
        )));
    }
    let mut c = Confusion::default();
    for (&p, &g) in predicted_conduct.iter().zip(gold_conduct) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(scores_from(c))
}

pub fn scores_from(c: Confusion) -> BinaryScores {
    let precision = (c.tp + c.fp > 0).then(|| c.tp as f64 / (c.tp + c.fp) as f64);
    let gold_pos = c.tp + c.fn_;
    let recall = (gold_pos > 0).then(|| c.tp as f64 / gold_pos as f64);
    let f1 = (gold_pos > 0).then(|| 2.0 * c.tp as f64 / (2 * c.tp + c.fp + c.fn_) as f64);
    BinaryScores {
        confusion: c,
        precision,
        recall,
        f1,
    }
}
