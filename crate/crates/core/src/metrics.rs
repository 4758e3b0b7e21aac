//! Evaluation: confusion matrix, per-class and mean IoU, pixel precision and
//! recall, tag-retrieval metrics and the flip-consistency rate.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::activation::{Label, LabelMap};
use crate::parser::ClassId;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("label index {0} out of range for {1} classes")]
    LabelOutOfRange(usize, usize),
    #[error("confusion matrix is empty")]
    EmptyMatrix,
}

/// Pixel counts over `classes + 1` labels; index 0 is background, class `c`
/// is row/column `c + 1`. Rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        let side = classes + 1;
        ConfusionMatrix {
            classes,
            counts: vec![0; side * side],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * (self.classes + 1) + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one prediction/ground-truth pair of label maps.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<(), EvalError> {
        if pred.pixels() != gt.pixels() {
            return Err(EvalError::DimMismatch {
                expected: gt.pixels(),
                got: pred.pixels(),
            });
        }
        let side = self.classes + 1;
        for (p, g) in pred.labels.iter().zip(&gt.labels) {
            let (pi, gi) = (p.to_index(), g.to_index());
            if pi >= side {
                return Err(EvalError::LabelOutOfRange(pi, self.classes));
            }
            if gi >= side {
                return Err(EvalError::LabelOutOfRange(gi, self.classes));
            }
            self.counts[gi * side + pi] += 1;
        }
        Ok(())
    }

    /// Elementwise sum, used to merge per-image matrices.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// Precision/recall pair for one tag group.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct TagGroupMetrics {
    pub group: String,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

/// Everything the evaluation harness reports.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    /// IoU per label index (0 is background), `None` where the union is
    /// empty.
    pub per_class_iou: Vec<Option<f64>>,
    /// Mean IoU over labels (classes and background) with nonzero union.
    pub mean_iou: f64,
    /// Pixel-pooled precision over foreground classes.
    pub precision: f64,
    /// Pixel-pooled recall over foreground classes.
    pub recall: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub tag_groups: Vec<TagGroupMetrics>,
}

impl MetricReport {
    /// Plain-text table with one aligned row per label.
    pub fn to_table(&self, class_names: &[String]) -> String {
        let mut rows = vec![("background".to_string(), self.per_class_iou[0])];
        for (i, iou) in self.per_class_iou.iter().enumerate().skip(1) {
            let name = class_names
                .get(i - 1)
                .cloned()
                .unwrap_or_else(|| format!("class{}", i - 1));
            rows.push((name, *iou));
        }
        let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        out.push_str(&format!("{:<width$}  IoU\n", "label", width = width));
        for (name, iou) in rows {
            match iou {
                Some(v) => out.push_str(&format!("{name:<width$}  {v:.4}\n", width = width)),
                None => out.push_str(&format!("{name:<width$}  -\n", width = width)),
            }
        }
        out.push_str(&format!("\nmean IoU   {:.4}\n", self.mean_iou));
        out.push_str(&format!("precision  {:.4}\n", self.precision));
        out.push_str(&format!("recall     {:.4}\n", self.recall));
        for tag in &self.tag_groups {
            let fmt = |v: Option<f64>| match v {
                Some(v) => format!("{v:.4}"),
                None => "-".to_string(),
            };
            out.push_str(&format!(
                "tags[{}]  precision {}  recall {}\n",
                tag.group,
                fmt(tag.precision),
                fmt(tag.recall)
            ));
        }
        out
    }
}

/// Derives IoU, mean IoU and pixel-pooled precision/recall from a confusion
/// matrix.
pub fn iou(cm: &ConfusionMatrix) -> Result<MetricReport, EvalError> {
    if cm.total() == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let side = cm.classes + 1;
    let mut per_class_iou = Vec::with_capacity(side);
    let mut iou_sum = 0.0;
    let mut iou_count = 0usize;
    for c in 0..side {
        let tp = cm.count(c, c);
        let mut fp = 0;
        let mut fn_ = 0;
        for other in 0..side {
            if other != c {
                fp += cm.count(other, c);
                fn_ += cm.count(c, other);
            }
        }
        let union = tp + fp + fn_;
        if union == 0 {
            per_class_iou.push(None);
        } else {
            let value = tp as f64 / union as f64;
            per_class_iou.push(Some(value));
            iou_sum += value;
            iou_count += 1;
        }
    }
    // micro precision/recall over foreground classes
    let mut tp_sum = 0;
    let mut fp_sum = 0;
    let mut fn_sum = 0;
    for c in 1..side {
        tp_sum += cm.count(c, c);
        for other in 0..side {
            if other != c {
                fp_sum += cm.count(other, c);
                fn_sum += cm.count(c, other);
            }
        }
    }
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok(MetricReport {
        per_class_iou,
        mean_iou: if iou_count == 0 {
            0.0
        } else {
            iou_sum / iou_count as f64
        },
        precision: ratio(tp_sum, tp_sum + fp_sum),
        recall: ratio(tp_sum, tp_sum + fn_sum),
        tag_groups: Vec::new(),
    })
}

/// Tag sets of one image: what the parser retrieved and what is actually
/// present.
#[derive(Debug, Clone)]
pub struct TagPair {
    pub retrieved: BTreeSet<ClassId>,
    pub actual: BTreeSet<ClassId>,
}

/// Per-group precision/recall of retrieved class tags.
///
/// For every image and group, precision is `|retrieved ∩ actual| /
/// |retrieved|` and recall `|retrieved ∩ actual| / |actual|` over the
/// group's classes; images with an empty denominator are excluded from that
/// group's mean. Classes missing from `groups` fall into the "all" group,
/// which always covers every class.
pub fn tag_retrieval_metrics(
    pairs: &[TagPair],
    groups: &BTreeMap<ClassId, String>,
) -> Vec<TagGroupMetrics> {
    let mut group_names: Vec<String> = groups
        .values()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    group_names.push("all".to_string());

    group_names
        .into_iter()
        .map(|group| {
            let in_group = |id: &ClassId| {
                group == "all" || groups.get(id).map(String::as_str) == Some(group.as_str())
            };
            let mut precisions = Vec::new();
            let mut recalls = Vec::new();
            for pair in pairs {
                let retrieved: BTreeSet<_> =
                    pair.retrieved.iter().copied().filter(|id| in_group(id)).collect();
                let actual: BTreeSet<_> =
                    pair.actual.iter().copied().filter(|id| in_group(id)).collect();
                let hit = retrieved.intersection(&actual).count() as f64;
                if !retrieved.is_empty() {
                    precisions.push(hit / retrieved.len() as f64);
                }
                if !actual.is_empty() {
                    recalls.push(hit / actual.len() as f64);
                }
            }
            let mean = |v: &[f64]| {
                if v.is_empty() {
                    None
                } else {
                    Some(v.iter().sum::<f64>() / v.len() as f64)
                }
            };
            TagGroupMetrics {
                group,
                precision: mean(&precisions),
                recall: mean(&recalls),
            }
        })
        .collect()
}

/// Fraction of pixels whose label in `labels` equals the mirrored label of
/// the flipped image.
pub fn flip_consistency(labels: &LabelMap, labels_flipped: &LabelMap) -> Result<f64, EvalError> {
    if labels.pixels() != labels_flipped.pixels() {
        return Err(EvalError::DimMismatch {
            expected: labels.pixels(),
            got: labels_flipped.pixels(),
        });
    }
    let mirrored = labels_flipped.flip_horizontal();
    let agree = labels
        .labels
        .iter()
        .zip(&mirrored.labels)
        .filter(|(a, b)| a == b)
        .count();
    Ok(agree as f64 / labels.pixels() as f64)
}
