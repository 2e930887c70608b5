//! Evaluation measures: macro-F1, forgetting and intransigence.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::ClassId;
use crate::error::{contract, Result};
use crate::losses::LossReport;

/// Per-class F1 over `classes`. A class that is never predicted and never
/// correct scores 0.
pub fn per_class_f1(predictions: &[ClassId], labels: &[ClassId], classes: &[ClassId]) -> BTreeMap<ClassId, f64> {
    let mut counts: BTreeMap<ClassId, (u64, u64, u64)> = classes.iter().map(|&k| (k, (0, 0, 0))).collect();
    for (&p, &y) in predictions.iter().zip(labels) {
        if p == y {
            if let Some(c) = counts.get_mut(&y) {
                c.0 += 1;
            }
        } else {
            if let Some(c) = counts.get_mut(&p) {
                c.1 += 1;
            }
            if let Some(c) = counts.get_mut(&y) {
                c.2 += 1;
            }
        }
    }
    counts
        .into_iter()
        .map(|(k, (tp, fp, fn_))| (k, f1_from_counts(tp, fp, fn_)))
        .collect()
}

pub fn f1_from_counts(tp: u64, fp: u64, fn_: u64) -> f64 {
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// `(2/|C|) Σ prec·rec/(prec+rec)` over `classes`.
pub fn macro_f1(predictions: &[ClassId], labels: &[ClassId], classes: &[ClassId]) -> f64 {
    if classes.is_empty() {
        return 0.0;
    }
    let per = per_class_f1(predictions, labels, classes);
    per.values().sum::<f64>() / per.len() as f64
}

/// `f = 1 − current/best` for one class, clamped at 0, and 0 when the best
/// historical score is 0.
pub fn class_forgetting(current: f64, best_before: f64) -> f64 {
    if best_before <= 0.0 {
        return 0.0;
    }
    let f = 1.0 - current / best_before;
    if f < 0.0 {
        0.0
    } else {
        f
    }
}

/// Mean forgetting over `base` at history index `t` (`t ≥ 1`), comparing
/// `history[t]` to the best score in `history[..t]`.
pub fn forgetting(history: &[BTreeMap<ClassId, f64>], t: usize, base: &[ClassId]) -> f64 {
    if t == 0 || t >= history.len() || base.is_empty() {
        return 0.0;
    }
    let total: f64 = base
        .iter()
        .map(|k| {
            let best = history[..t].iter().filter_map(|h| h.get(k)).cloned().fold(0.0, f64::max);
            let current = history[t].get(k).copied().unwrap_or(0.0);
            class_forgetting(current, best)
        })
        .sum();
    total / base.len() as f64
}

/// Mean of `reference[j] − current[j]` over `new_classes`. Negative values
/// are allowed. Returns `None` when there are no new classes to average.
pub fn intransigence(
    reference: &BTreeMap<ClassId, f64>,
    current: &BTreeMap<ClassId, f64>,
    new_classes: &[ClassId],
) -> Result<Option<f64>> {
    if new_classes.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for k in new_classes {
        let r = reference.get(k).ok_or_else(|| contract!("no reference score for class {}", k))?;
        total += r - current.get(k).copied().unwrap_or(0.0);
    }
    Ok(Some(total / new_classes.len() as f64))
}

/// One held-out evaluation of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub classes_seen: Vec<ClassId>,
    /// Per-class F1 on the overall held-out set, `a_{t,j}`.
    pub per_class: BTreeMap<ClassId, f64>,
    pub base_f1: f64,
    pub new_f1: Option<f64>,
    pub overall_f1: f64,
    pub forgetting: f64,
    pub intransigence: Option<f64>,
    pub loss: Option<LossReport>,
}

/// Summary numbers taken from a ledger.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub base_final: f64,
    pub new_final: f64,
    pub overall_final: f64,
    pub forgetting_final: f64,
    pub intransigence_final: f64,
    pub base_mean: f64,
    pub new_mean: f64,
    pub overall_mean: f64,
}

/// Evaluation history of one continual run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsLedger {
    pub base_classes: Vec<ClassId>,
    pub reference: Option<BTreeMap<ClassId, f64>>,
    pub records: Vec<EvalRecord>,
}

/// Raw scores of one evaluation, before the derived history measures.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub classes_seen: Vec<ClassId>,
    pub per_class: BTreeMap<ClassId, f64>,
    pub base_f1: f64,
    pub new_f1: Option<f64>,
    pub overall_f1: f64,
}

impl MetricsLedger {
    pub fn new(base_classes: Vec<ClassId>, reference: Option<BTreeMap<ClassId, f64>>) -> Self {
        Self { base_classes, reference, records: Vec::new() }
    }

    /// Appends an evaluation, filling in forgetting and intransigence from
    /// the history so far.
    pub fn push(&mut self, step: usize, eval: Evaluation, loss: Option<LossReport>) -> Result<&EvalRecord> {
        let t = self.records.len();
        let mut history: Vec<BTreeMap<ClassId, f64>> = self.records.iter().map(|r| r.per_class.clone()).collect();
        history.push(eval.per_class.clone());
        let forgetting = forgetting(&history, t, &self.base_classes);
        let new_seen: Vec<ClassId> =
            eval.classes_seen.iter().copied().filter(|k| !self.base_classes.contains(k)).collect();
        let intransigence = match &self.reference {
            Some(r) => intransigence(r, &eval.per_class, &new_seen)?,
            None => None,
        };
        self.records.push(EvalRecord {
            step,
            classes_seen: eval.classes_seen,
            per_class: eval.per_class,
            base_f1: eval.base_f1,
            new_f1: eval.new_f1,
            overall_f1: eval.overall_f1,
            forgetting,
            intransigence,
            loss,
        });
        Ok(self.records.last().expect("just pushed"))
    }

    /// Mean forgetting of the base classes at record index `t`.
    pub fn forgetting(&self, t: usize) -> f64 {
        let history: Vec<BTreeMap<ClassId, f64>> = self.records.iter().map(|r| r.per_class.clone()).collect();
        forgetting(&history, t, &self.base_classes)
    }

    pub fn summary(&self) -> LedgerSummary {
        let Some(last) = self.records.last() else {
            return LedgerSummary::default();
        };
        let n = self.records.len() as f64;
        let new_vals: Vec<f64> = self.records.iter().filter_map(|r| r.new_f1).collect();
        LedgerSummary {
            base_final: last.base_f1,
            new_final: last.new_f1.unwrap_or(0.0),
            overall_final: last.overall_f1,
            forgetting_final: last.forgetting,
            intransigence_final: last.intransigence.unwrap_or(0.0),
            base_mean: self.records.iter().map(|r| r.base_f1).sum::<f64>() / n,
            new_mean: if new_vals.is_empty() { 0.0 } else { new_vals.iter().sum::<f64>() / new_vals.len() as f64 },
            overall_mean: self.records.iter().map(|r| r.overall_f1).sum::<f64>() / n,
        }
    }
}
