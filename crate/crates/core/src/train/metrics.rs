use std::fmt::Write as _;

use crate::dataio::{Dataset, Label, PointCloud};
use crate::error::{Error, Result};
use crate::model::{argmax, predict_proba, HeadKind, RcNet};
use crate::scalar::Scalar;

/// IoU assigned to a part that is absent from both prediction and label.
pub const EMPTY_UNION_IOU: f64 = 1.0;

/// Class probabilities for every cloud of a dataset: one row (1×K) per
/// classified cloud, or N rows (N×M) per segmented cloud, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions<T> {
    pub width: usize,
    pub probs: Vec<Vec<T>>,
}

impl<T: Scalar> Predictions<T> {
    /// Argmax per row; for segmented clouds with a known category the argmax
    /// is taken over that category's parts only.
    pub fn labels(&self, data: &Dataset<T>) -> Vec<Vec<u32>> {
        self.probs
            .iter()
            .zip(&data.clouds)
            .map(|(p, c)| {
                let parts = c
                    .category
                    .and_then(|k| data.part_sets.get(k as usize))
                    .filter(|_| c.label.is_per_point());
                p.chunks(self.width)
                    .map(|row| match parts {
                        Some(ps) if !ps.is_empty() => {
                            let mut best = ps[0];
                            for &q in &ps[1..] {
                                if row[q as usize] > row[best as usize] {
                                    best = q;
                                }
                            }
                            best
                        }
                        _ => argmax(row) as u32,
                    })
                    .collect()
            })
            .collect()
    }
}

/// Eval-mode probabilities for every cloud, computed `batch` clouds at a time.
pub fn predict_dataset<T: Scalar>(
    model: &RcNet<T>,
    data: &Dataset<T>,
    batch: usize,
) -> Result<Predictions<T>> {
    let width = model.config.num_labels;
    let mut probs = Vec::with_capacity(data.len());
    for chunk in data.clouds.chunks(batch.max(1)) {
        let refs: Vec<&PointCloud<T>> = chunk.iter().map(|c| &c.cloud).collect();
        let p = predict_proba(&model.logits(&refs)?);
        match model.config.head {
            HeadKind::Classify => probs.extend(p.data().chunks(width).map(<[T]>::to_vec)),
            HeadKind::Segment => {
                let mut at = 0;
                for c in chunk {
                    let n = c.cloud.len() * width;
                    probs.push(p.data()[at..at + n].to_vec());
                    at += n;
                }
            }
        }
    }
    Ok(Predictions { width, probs })
}

/// Accuracy, per-class accuracy (None for absent classes), and the K×K
/// confusion matrix indexed `[truth][prediction]`.
pub fn classification_metrics(
    preds: &[usize],
    labels: &[usize],
    k: usize,
) -> (f64, Vec<Option<f64>>, Vec<Vec<usize>>) {
    let mut confusion = vec![vec![0; k]; k];
    for (&p, &l) in preds.iter().zip(labels) {
        confusion[l][p] += 1;
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let per_class = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[c] as f64 / n as f64)
        })
        .collect();
    (correct as f64 / labels.len().max(1) as f64, per_class, confusion)
}

/// Instance-average mIoU: per shape, the mean IoU over its category's parts
/// (an empty union counts as [`EMPTY_UNION_IOU`]), averaged over shapes.
/// Also returns the mean per category (None when a category has no shapes).
pub fn evaluate_miou(
    preds: &[Vec<u32>],
    labels: &[Vec<u32>],
    categories: &[u32],
    part_sets: &[Vec<u32>],
) -> Result<(f64, Vec<Option<f64>>)> {
    if preds.len() != labels.len() || labels.len() != categories.len() {
        return Err(Error::Data("prediction, label and category counts differ".into()));
    }
    let mut sums = vec![(0.0, 0usize); part_sets.len()];
    let mut total = 0.0;
    for ((p, l), &cat) in preds.iter().zip(labels).zip(categories) {
        let parts = part_sets
            .get(cat as usize)
            .filter(|ps| !ps.is_empty())
            .ok_or_else(|| Error::Data(format!("category {cat} has no part set")))?;
        if p.len() != l.len() {
            return Err(Error::Data("prediction and label lengths differ".into()));
        }
        if let Some(bad) = l.iter().find(|v| !parts.contains(v)) {
            return Err(Error::Data(format!(
                "label {bad} is not a part of category {cat}"
            )));
        }
        let mut shape = 0.0;
        for &part in parts {
            let (mut inter, mut union) = (0usize, 0usize);
            for (&a, &b) in p.iter().zip(l) {
                let (pa, lb) = (a == part, b == part);
                inter += usize::from(pa && lb);
                union += usize::from(pa || lb);
            }
            shape += if union == 0 {
                EMPTY_UNION_IOU
            } else {
                inter as f64 / union as f64
            };
        }
        let shape = shape / parts.len() as f64;
        total += shape;
        sums[cat as usize].0 += shape;
        sums[cat as usize].1 += 1;
    }
    let per_cat = sums
        .iter()
        .map(|&(s, n)| (n > 0).then(|| s / n as f64))
        .collect();
    Ok((total / preds.len().max(1) as f64, per_cat))
}

/// Pooled point accuracy, per-class IoU over `m` classes (empty union counts
/// as [`EMPTY_UNION_IOU`]) and their mean.
pub fn pointwise_metrics(preds: &[Vec<u32>], labels: &[Vec<u32>], m: usize) -> (f64, Vec<f64>, f64) {
    let mut inter = vec![0usize; m];
    let mut union = vec![0usize; m];
    let (mut correct, mut total) = (0usize, 0usize);
    for (p, l) in preds.iter().zip(labels) {
        for (&a, &b) in p.iter().zip(l) {
            let (a, b) = (a as usize, b as usize);
            total += 1;
            if a == b {
                correct += 1;
                inter[a] += 1;
                union[a] += 1;
            } else {
                union[a] += 1;
                union[b] += 1;
            }
        }
    }
    let iou: Vec<f64> = (0..m)
        .map(|c| {
            if union[c] == 0 {
                EMPTY_UNION_IOU
            } else {
                inter[c] as f64 / union[c] as f64
            }
        })
        .collect();
    let mean = iou.iter().sum::<f64>() / m.max(1) as f64;
    (correct as f64 / total.max(1) as f64, iou, mean)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub head: HeadKind,
    pub samples: usize,
    /// Classification accuracy, or pooled point accuracy.
    pub accuracy: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub confusion: Vec<Vec<usize>>,
    pub instance_miou: Option<f64>,
    pub per_category_miou: Vec<Option<f64>>,
    pub class_iou: Vec<f64>,
    pub mean_iou: Option<f64>,
}

impl MetricsReport {
    /// Accuracy for classification, instance mIoU (or point accuracy when no
    /// part sets are known) for segmentation.
    pub fn headline(&self) -> f64 {
        self.instance_miou.unwrap_or(self.accuracy)
    }

    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "na".into());
        let mut s = String::new();
        let _ = writeln!(s, "head = {}", self.head);
        let _ = writeln!(s, "samples = {}", self.samples);
        match self.head {
            HeadKind::Classify => {
                let _ = writeln!(s, "accuracy = {}", self.accuracy);
                for (c, a) in self.per_class_accuracy.iter().enumerate() {
                    let _ = writeln!(s, "class_accuracy.{c} = {}", opt(*a));
                }
                for (c, row) in self.confusion.iter().enumerate() {
                    let cells: Vec<String> = row.iter().map(usize::to_string).collect();
                    let _ = writeln!(s, "confusion.{c} = {}", cells.join(","));
                }
            }
            HeadKind::Segment => {
                let _ = writeln!(s, "point_accuracy = {}", self.accuracy);
                let _ = writeln!(s, "instance_miou = {}", opt(self.instance_miou));
                for (c, v) in self.per_category_miou.iter().enumerate() {
                    let _ = writeln!(s, "category_miou.{c} = {}", opt(*v));
                }
                let _ = writeln!(s, "mean_iou = {}", opt(self.mean_iou));
                for (c, v) in self.class_iou.iter().enumerate() {
                    let _ = writeln!(s, "class_iou.{c} = {v}");
                }
                let _ = writeln!(s, "miou_convention = empty union counts as IoU {EMPTY_UNION_IOU}");
            }
        }
        s
    }

    /// Metrics of precomputed probabilities against a dataset's labels.
    pub fn from_predictions<T: Scalar>(
        head: HeadKind,
        preds: &Predictions<T>,
        data: &Dataset<T>,
    ) -> Result<Self> {
        if preds.probs.len() != data.len() {
            return Err(Error::Data("one prediction per cloud expected".into()));
        }
        let labels = preds.labels(data);
        let mut report = MetricsReport {
            head,
            samples: data.len(),
            accuracy: 0.0,
            per_class_accuracy: Vec::new(),
            confusion: Vec::new(),
            instance_miou: None,
            per_category_miou: Vec::new(),
            class_iou: Vec::new(),
            mean_iou: None,
        };
        match head {
            HeadKind::Classify => {
                let p: Vec<usize> = labels.iter().map(|l| l[0] as usize).collect();
                let t: Vec<usize> = data
                    .clouds
                    .iter()
                    .map(|c| c.class().map(|v| v as usize))
                    .collect::<Option<_>>()
                    .ok_or_else(|| Error::Data("classification needs class labels".into()))?;
                let (acc, per, conf) = classification_metrics(&p, &t, preds.width);
                report.accuracy = acc;
                report.per_class_accuracy = per;
                report.confusion = conf;
            }
            HeadKind::Segment => {
                let truth: Vec<Vec<u32>> = data
                    .clouds
                    .iter()
                    .map(|c| match &c.label {
                        Label::PerPoint(ls) => Ok(ls.clone()),
                        Label::Class(_) => Err(Error::Data("segmentation needs point labels".into())),
                    })
                    .collect::<Result<_>>()?;
                let (acc, iou, mean) = pointwise_metrics(&labels, &truth, preds.width);
                report.accuracy = acc;
                report.class_iou = iou;
                report.mean_iou = Some(mean);
                let cats: Option<Vec<u32>> = data.clouds.iter().map(|c| c.category).collect();
                if let (Some(cats), false) = (cats, data.part_sets.is_empty()) {
                    let (inst, per) = evaluate_miou(&labels, &truth, &cats, &data.part_sets)?;
                    report.instance_miou = Some(inst);
                    report.per_category_miou = per;
                }
            }
        }
        Ok(report)
    }
}

/// Eval-mode metrics of a model on a dataset (no augmentation).
pub fn evaluate<T: Scalar>(model: &RcNet<T>, data: &Dataset<T>, batch: usize) -> Result<MetricsReport> {
    let preds = predict_dataset(model, data, batch)?;
    MetricsReport::from_predictions(model.config.head, &preds, data)
}

pub fn evaluate_classification<T: Scalar>(
    model: &RcNet<T>,
    data: &Dataset<T>,
    batch: usize,
) -> Result<MetricsReport> {
    if model.config.head != HeadKind::Classify {
        return Err(Error::Config("classification metrics need a classification model".into()));
    }
    evaluate(model, data, batch)
}

pub fn evaluate_pointwise<T: Scalar>(
    model: &RcNet<T>,
    data: &Dataset<T>,
    batch: usize,
) -> Result<MetricsReport> {
    if model.config.head != HeadKind::Segment {
        return Err(Error::Config("point metrics need a segmentation model".into()));
    }
    evaluate(model, data, batch)
}
