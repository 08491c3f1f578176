//! Evaluation metrics: 1-D IoU for line ranges, macro-averaged
//! classification scores, and whole-test-set evaluation of a [`Diagnoser`].
//!
//! Two bookkeeping rules keep the numbers honest, and both are declared in
//! the rendered report header:
//!
//! * binary-vulnerable truths (no 10-way class) are excluded from
//!   classification metrics but still count toward `mean_iou`;
//! * `mean_iou` averages only samples whose truth carries a line range,
//!   and is absent — not zero — when there are none.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::corpus::{Corpus, CweClass, LineRange};
use crate::error::{Error, Result};
use crate::model::Diagnoser;

/// Intersection-over-union of two inclusive line ranges, treating each as
/// its set of integer lines. Always in [0, 1]; inverted ranges cannot be
/// constructed, so the quotient is total.
pub fn iou_1d(pred: LineRange, truth: LineRange) -> f64 {
    let lo = pred.start().max(truth.start()) as i64;
    let hi = pred.end().min(truth.end()) as i64;
    let inter = (hi - lo + 1).max(0) as f64;
    let union = pred.len() as f64 + truth.len() as f64 - inter;
    inter / union
}

/// Classification and localization quality over one evaluation set.
/// `precision`, `recall`, and `f1` are macro averages over the classes
/// present in the truths; `per_class_f1` keeps the per-class values so
/// other averaging conventions stay recoverable.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean IoU over samples whose truth has a line range; `None` when the
    /// set has no such samples.
    pub mean_iou: Option<f64>,
    /// Macro-component F1 per class code, for every class present in the
    /// truths.
    pub per_class_f1: BTreeMap<u16, f64>,
    pub n_samples: usize,
}

/// Macro-averaged classification metrics over parallel prediction/truth
/// slices. The macro set is the classes present in `truths`; a class that
/// is only ever predicted contributes false positives but no row of its
/// own. Binary-vulnerable labels are refused — they have no 10-way class
/// and must be excluded upstream.
pub fn classification_report(preds: &[CweClass], truths: &[CweClass]) -> Result<EvalReport> {
    if preds.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} predictions against {} truths",
            preds.len(),
            truths.len()
        )));
    }
    if truths.is_empty() {
        return Err(Error::invalid("classification needs at least one sample"));
    }
    if let Some(c) = preds.iter().chain(truths).find(|c| !c.is_classifiable()) {
        return Err(Error::invalid(format!(
            "{c} has no 10-way class; exclude such samples before scoring"
        )));
    }

    let n = truths.len() as f64;
    let hits = preds
        .iter()
        .zip(truths)
        .filter(|(p, t)| p == t)
        .count() as f64;
    let accuracy = hits / n;

    let mut classes: Vec<u16> = truths.iter().map(|c| c.code()).collect();
    classes.sort_unstable();
    classes.dedup();

    let mut precision = 0.0;
    let mut recall = 0.0;
    let mut f1 = 0.0;
    let mut per_class_f1 = BTreeMap::new();
    for &class in &classes {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fnn = 0.0;
        for (p, t) in preds.iter().zip(truths) {
            let p_hit = p.code() == class;
            let t_hit = t.code() == class;
            match (p_hit, t_hit) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fnn += 1.0,
                (false, false) => {}
            }
        }
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = tp / (tp + fnn);
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        precision += p;
        recall += r;
        f1 += f;
        per_class_f1.insert(class, f);
    }
    let k = classes.len() as f64;

    Ok(EvalReport {
        accuracy,
        precision: precision / k,
        recall: recall / k,
        f1: f1 / k,
        mean_iou: None,
        per_class_f1,
        n_samples: truths.len(),
    })
}

/// Diagnoses every function in `test_ids` and scores the results.
/// Classification covers the samples whose truth is classifiable;
/// `mean_iou` covers the samples whose truth has a line range, scoring a
/// missing predicted range as 0. Every listed function must exist and be
/// labeled.
pub fn evaluate(model: &dyn Diagnoser, corpus: &Corpus, test_ids: &[String]) -> Result<EvalReport> {
    if test_ids.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    let mut ious = Vec::new();
    for id in test_ids {
        let function = corpus
            .get(id)
            .ok_or_else(|| Error::invalid(format!("evaluation references unknown id {id}")))?;
        let label = function.label.ok_or_else(|| {
            Error::invalid(format!("function {id} is unlabeled and cannot be scored"))
        })?;
        let diagnosis = model.diagnose(function)?;
        if label.class().is_classifiable() {
            preds.push(diagnosis.class);
            truths.push(label.class());
        }
        if let Some(truth_range) = label.range() {
            let iou = diagnosis
                .range
                .map(|pred_range| iou_1d(pred_range, truth_range))
                .unwrap_or(0.0);
            ious.push(iou);
        }
    }
    if truths.is_empty() {
        return Err(Error::invalid(
            "no classifiable truths in the evaluation set",
        ));
    }
    let mut report = classification_report(&preds, &truths)?;
    report.n_samples = test_ids.len();
    report.mean_iou = if ious.is_empty() {
        None
    } else {
        Some(ious.iter().sum::<f64>() / ious.len() as f64)
    };
    Ok(report)
}

/// Renders a report as line-oriented text with a fixed key order, suitable
/// for golden-file comparison. The header states the two scoring rules.
pub fn render_report(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str("# vulnscope evaluation report\n");
    out.push_str(
        "# classification covers truths with a 10-way class; \
         binary-vulnerable truths count only toward mean_iou\n",
    );
    out.push_str("# mean_iou averages truths that carry a line range; absent means none did\n");
    out.push_str(&format!("accuracy {}\n", report.accuracy));
    out.push_str(&format!("precision {}\n", report.precision));
    out.push_str(&format!("recall {}\n", report.recall));
    out.push_str(&format!("f1 {}\n", report.f1));
    match report.mean_iou {
        Some(v) => out.push_str(&format!("mean_iou {v}\n")),
        None => out.push_str("mean_iou absent\n"),
    }
    out.push_str(&format!("n_samples {}\n", report.n_samples));
    for (class, f1) in &report.per_class_f1 {
        out.push_str(&format!("per_class_f1 {class} {f1}\n"));
    }
    out
}
