//! Confusion-matrix based segmentation metrics.

use std::fmt::Write as _;

use crate::error::{config_err, Error, Result};
use crate::synthetic::{class, CLASS_NAMES, NUM_CLASSES};
use crate::tensor::LabelMap;

/// `counts[gt][pred]` pixel counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    #[inline]
    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, gt: usize) -> u64 {
        (0..self.classes).map(|p| self.get(gt, p)).sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.classes).map(|g| self.get(g, pred)).sum()
    }

    /// Element-wise sum, for merging shards.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(config_err!(
                "cannot merge {}-class and {}-class confusion matrices",
                self.classes,
                other.classes
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Add one prediction/ground-truth pair to `cm`.
pub fn accumulate_confusion(pred: &LabelMap, gt: &LabelMap, cm: &mut ConfusionMatrix) -> Result<()> {
    if pred.h != gt.h || pred.w != gt.w {
        return Err(config_err!(
            "prediction {}x{} and ground truth {}x{} differ",
            pred.h,
            pred.w,
            gt.h,
            gt.w
        ));
    }
    let n = cm.classes;
    if let Some(&bad) = pred.data.iter().chain(&gt.data).find(|&&v| v as usize >= n) {
        return Err(Error::Validation(format!("label {bad} out of range for {n} classes")));
    }
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        cm.counts[g as usize * n + p as usize] += 1;
    }
    Ok(())
}

/// Scores of one class. `f1`/`iou` are `None` when the class is absent from
/// both prediction and ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub per_class: Vec<ClassScores>,
    /// Mean over defined foreground classes (background excluded).
    pub mean_f1: f64,
    pub mean_iou: f64,
    /// Trace over total, all pixels.
    pub pixel_accuracy: f64,
    /// Mean foreground recall.
    pub mean_class_accuracy: f64,
    pub helen_overall_f1: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn scores(tp: u64, pred: u64, gt: u64) -> ClassScores {
    let union = pred + gt - tp;
    ClassScores {
        precision: ratio(tp, pred),
        recall: ratio(tp, gt),
        f1: ratio(2 * tp, pred + gt),
        iou: ratio(tp, union),
    }
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Validation("confusion matrix is empty".into()));
    }
    let per_class: Vec<ClassScores> = (0..cm.classes)
        .map(|c| scores(cm.get(c, c), cm.col_sum(c), cm.row_sum(c)))
        .collect();
    let fg = || per_class.iter().skip(1);
    let trace: u64 = (0..cm.classes).map(|c| cm.get(c, c)).sum();
    Ok(MetricsReport {
        mean_f1: mean(fg().map(|s| s.f1)),
        mean_iou: mean(fg().map(|s| s.iou)),
        pixel_accuracy: trace as f64 / total as f64,
        mean_class_accuracy: mean(fg().map(|s| s.recall)),
        helen_overall_f1: (cm.classes == NUM_CLASSES).then(|| helen_overall_f1(cm).ok()).flatten(),
        per_class,
    })
}

/// Merged categories of the Helen overall score.
pub const HELEN_GROUPS: [(&str, &[u8]); 4] = [
    ("brows", &[class::L_BROW, class::R_BROW]),
    ("eyes", &[class::L_EYE, class::R_EYE]),
    ("nose", &[class::NOSE]),
    ("mouth", &[class::U_LIP, class::INNER_MOUTH, class::L_LIP]),
];

/// F1 of each merged group computed from the merged confusion.
pub fn helen_group_f1(cm: &ConfusionMatrix) -> Result<Vec<Option<f64>>> {
    if cm.classes != NUM_CLASSES {
        return Err(config_err!(
            "merged F1 needs the {NUM_CLASSES}-class layout, got {} classes",
            cm.classes
        ));
    }
    Ok(HELEN_GROUPS
        .iter()
        .map(|(_, members)| {
            let inside = |c: usize| members.contains(&(c as u8));
            let mut tp = 0;
            let mut pred = 0;
            let mut gt = 0;
            for g in 0..cm.classes {
                for p in 0..cm.classes {
                    let v = cm.get(g, p);
                    if inside(g) && inside(p) {
                        tp += v;
                    }
                    if inside(p) {
                        pred += v;
                    }
                    if inside(g) {
                        gt += v;
                    }
                }
            }
            ratio(2 * tp, pred + gt)
        })
        .collect())
}

/// Unweighted mean of the merged brows/eyes/nose/mouth F1 scores.
pub fn helen_overall_f1(cm: &ConfusionMatrix) -> Result<f64> {
    let groups = helen_group_f1(cm)?;
    Ok(groups.iter().map(|g| g.unwrap_or(0.0)).sum::<f64>() / groups.len() as f64)
}

/// Tab-separated report: header, one row per class, mean rows, overall row.
pub fn report_tsv(report: &MetricsReport) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"));
    let mut out = String::from("name\tprecision\trecall\tf1\tiou\n");
    for (c, s) in report.per_class.iter().enumerate() {
        let name = CLASS_NAMES.get(c).copied().map_or_else(|| format!("class{c}"), str::to_string);
        let _ = writeln!(
            out,
            "{name}\t{}\t{}\t{}\t{}",
            fmt(s.precision),
            fmt(s.recall),
            fmt(s.f1),
            fmt(s.iou)
        );
    }
    let _ = writeln!(out, "mean_f1\t\t\t{:.6}\t", report.mean_f1);
    let _ = writeln!(out, "mean_iou\t\t\t\t{:.6}", report.mean_iou);
    let _ = writeln!(out, "pixel_accuracy\t\t{:.6}\t\t", report.pixel_accuracy);
    let _ = writeln!(out, "mean_class_accuracy\t\t{:.6}\t\t", report.mean_class_accuracy);
    let _ = writeln!(out, "helen_overall_f1\t\t\t{}\t", fmt(report.helen_overall_f1));
    out
}

/// Number of non-header rows [`report_tsv`] emits for `classes` classes.
pub fn report_row_count(classes: usize) -> usize {
    classes + 4 + 1
}
