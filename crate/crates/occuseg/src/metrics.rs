//! Pixel-confusion metrics per class, FULL-contact union evaluation, and
//! fold-wise aggregation.
//!
//! Per image and class the confusion counts are exact pixel tallies;
//! IoU/Dice/Precision/Recall follow the standard formulas. A metric whose
//! denominator is zero is undefined-marked (`None`) and excluded from every
//! mean rather than coerced to 0 or 1. Aggregation mirrors the fold scheme:
//! mean and sample standard deviation over each fold's validation images,
//! then the mean of fold means and the mean of fold standard deviations.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{BinaryMask, LabelMask, MaskError};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("fold {0} has no images")]
    EmptyFold(usize),
    #[error("image '{image}' carries fold {fold}, but only {num_folds} folds were declared")]
    FoldOutOfRange {
        image: String,
        fold: usize,
        num_folds: usize,
    },
    #[error("no folds declared")]
    NoFolds,
}

/// Pixel counts of one class on one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `TP / (TP + FP + FN)`; undefined when the class is absent from both
    /// prediction and target.
    pub fn iou(&self) -> Option<f64> {
        let denom = self.tp + self.fp + self.fn_;
        (denom > 0).then(|| self.tp as f64 / denom as f64)
    }

    /// `2TP / (2TP + FP + FN)`.
    pub fn dice(&self) -> Option<f64> {
        let denom = 2 * self.tp + self.fp + self.fn_;
        (denom > 0).then(|| 2.0 * self.tp as f64 / denom as f64)
    }

    /// `TP / (TP + FP)`; undefined when nothing was predicted positive.
    pub fn precision(&self) -> Option<f64> {
        let denom = self.tp + self.fp;
        (denom > 0).then(|| self.tp as f64 / denom as f64)
    }

    /// `TP / (TP + FN)`; undefined when the target has no positives.
    pub fn recall(&self) -> Option<f64> {
        let denom = self.tp + self.fn_;
        (denom > 0).then(|| self.tp as f64 / denom as f64)
    }

    pub fn metric(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::Iou => self.iou(),
            Metric::Dice => self.dice(),
            Metric::Precision => self.precision(),
            Metric::Recall => self.recall(),
        }
    }
}

/// Confusion counts of `class_id` between prediction and target.
pub fn confusion(
    pred: &LabelMask,
    target: &LabelMask,
    class_id: u8,
) -> Result<ConfusionCounts, MetricsError> {
    if pred.width() != target.width() || pred.height() != target.height() {
        return Err(MaskError::ShapeMismatch {
            w0: pred.width(),
            h0: pred.height(),
            w1: target.width(),
            h1: target.height(),
        }
        .into());
    }
    let mut counts = ConfusionCounts::default();
    for (&p, &t) in pred.labels().iter().zip(target.labels()) {
        match (p == class_id, t == class_id) {
            (true, true) => counts.tp += 1,
            (true, false) => counts.fp += 1,
            (false, true) => counts.fn_ += 1,
            (false, false) => counts.tn += 1,
        }
    }
    Ok(counts)
}

/// Confusion counts of two binary masks (positives vs positives).
pub fn confusion_binary(
    pred: &BinaryMask,
    target: &BinaryMask,
) -> Result<ConfusionCounts, MetricsError> {
    if pred.width() != target.width() || pred.height() != target.height() {
        return Err(MaskError::ShapeMismatch {
            w0: pred.width(),
            h0: pred.height(),
            w1: target.width(),
            h1: target.height(),
        }
        .into());
    }
    let mut counts = ConfusionCounts::default();
    for y in 0..pred.height() {
        for x in 0..pred.width() {
            match (pred.get(x, y), target.get(x, y)) {
                (true, true) => counts.tp += 1,
                (true, false) => counts.fp += 1,
                (false, true) => counts.fn_ += 1,
                (false, false) => counts.tn += 1,
            }
        }
    }
    Ok(counts)
}

/// FULL-contact counts: both masks binarized as `label != Background`, i.e.
/// the union of the MTP and MFP masks treated as one parent class.
pub fn full_contact_metrics(
    pred: &LabelMask,
    target: &LabelMask,
) -> Result<ConfusionCounts, MetricsError> {
    if pred.width() != target.width() || pred.height() != target.height() {
        return Err(MaskError::ShapeMismatch {
            w0: pred.width(),
            h0: pred.height(),
            w1: target.width(),
            h1: target.height(),
        }
        .into());
    }
    let mut counts = ConfusionCounts::default();
    for (&p, &t) in pred.labels().iter().zip(target.labels()) {
        match (p != 0, t != 0) {
            (true, true) => counts.tp += 1,
            (true, false) => counts.fp += 1,
            (false, true) => counts.fn_ += 1,
            (false, false) => counts.tn += 1,
        }
    }
    Ok(counts)
}

/// Classes reported by the evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EvalClass {
    Mtp,
    Mfp,
    Full,
}

impl EvalClass {
    pub const ALL: [EvalClass; 3] = [EvalClass::Mtp, EvalClass::Mfp, EvalClass::Full];

    pub fn name(&self) -> &'static str {
        match self {
            EvalClass::Mtp => "MTP",
            EvalClass::Mfp => "MFP",
            EvalClass::Full => "FULL",
        }
    }
}

impl fmt::Display for EvalClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Iou,
    Dice,
    Precision,
    Recall,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Iou, Metric::Dice, Metric::Precision, Metric::Recall];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::Iou => "IoU",
            Metric::Dice => "Dice",
            Metric::Precision => "Precision",
            Metric::Recall => "Recall",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One evaluated image/class pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub image: String,
    pub fold: usize,
    pub class: EvalClass,
    #[serde(flatten)]
    pub counts: ConfusionCounts,
}

/// Mean over folds of the per-fold means and standard deviations. `None`
/// when no fold produced a defined value.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricAggregate {
    pub mean: Option<f64>,
    pub mean_std: Option<f64>,
}

/// Per-fold mean/std of one class and metric; `None` for folds where every
/// image was undefined.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FoldBreakdown {
    pub fold_means: Vec<Option<f64>>,
    pub fold_stds: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassAggregate {
    pub class: EvalClass,
    pub aggregates: [MetricAggregate; 4],
    pub folds: [FoldBreakdown; 4],
}

/// Full evaluation report: aggregates per class and metric, per-fold
/// breakdowns, and the raw per-image rows for external recomputation.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub num_folds: usize,
    pub classes: Vec<ClassAggregate>,
    pub rows: Vec<ImageMetrics>,
}

fn sample_std(values: &[f64], mean: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// Aggregate per-image metrics into the fold-wise report: per fold the mean
/// and sample standard deviation over that fold's images (a single image
/// gives std 0), then the mean of fold means and of fold stds. Undefined
/// per-image values are excluded; a fold with no defined values is excluded
/// from the across-fold means.
pub fn aggregate_folds(
    rows: Vec<ImageMetrics>,
    num_folds: usize,
) -> Result<MetricsReport, MetricsError> {
    if num_folds == 0 {
        return Err(MetricsError::NoFolds);
    }
    for row in &rows {
        if row.fold >= num_folds {
            return Err(MetricsError::FoldOutOfRange {
                image: row.image.clone(),
                fold: row.fold,
                num_folds,
            });
        }
    }
    for fold in 0..num_folds {
        if !rows.iter().any(|r| r.fold == fold) {
            return Err(MetricsError::EmptyFold(fold));
        }
    }

    let mut classes = Vec::new();
    for class in EvalClass::ALL {
        let mut aggregates = [MetricAggregate::default(); 4];
        let mut folds: [FoldBreakdown; 4] = Default::default();
        for (m_idx, metric) in Metric::ALL.into_iter().enumerate() {
            let mut fold_means = Vec::with_capacity(num_folds);
            let mut fold_stds = Vec::with_capacity(num_folds);
            for fold in 0..num_folds {
                let values: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.class == class && r.fold == fold)
                    .filter_map(|r| r.counts.metric(metric))
                    .collect();
                if values.is_empty() {
                    fold_means.push(None);
                    fold_stds.push(None);
                } else {
                    let mean = values.iter().sum::<f64>() / values.len() as f64;
                    fold_means.push(Some(mean));
                    fold_stds.push(Some(sample_std(&values, mean)));
                }
            }
            let defined: Vec<(f64, f64)> = fold_means
                .iter()
                .zip(&fold_stds)
                .filter_map(|(m, s)| m.zip(*s))
                .collect();
            if !defined.is_empty() {
                let n = defined.len() as f64;
                aggregates[m_idx] = MetricAggregate {
                    mean: Some(defined.iter().map(|(m, _)| m).sum::<f64>() / n),
                    mean_std: Some(defined.iter().map(|(_, s)| s).sum::<f64>() / n),
                };
            }
            folds[m_idx] = FoldBreakdown {
                fold_means,
                fold_stds,
            };
        }
        classes.push(ClassAggregate {
            class,
            aggregates,
            folds,
        });
    }

    Ok(MetricsReport {
        num_folds,
        classes,
        rows,
    })
}

impl MetricsReport {
    pub fn aggregate(&self, class: EvalClass, metric: Metric) -> MetricAggregate {
        let class_agg = self
            .classes
            .iter()
            .find(|c| c.class == class)
            .expect("every EvalClass is present in the report");
        let idx = Metric::ALL.iter().position(|m| *m == metric).unwrap();
        class_agg.aggregates[idx]
    }

    /// Structured text table: one row per class and metric, columns mean and
    /// mean-of-std.
    pub fn render_table(&self) -> String {
        let fmt_value = |v: Option<f64>| match v {
            Some(v) => format!("{v:.6}"),
            None => "undefined".to_string(),
        };
        let mut out = String::new();
        out.push_str(&format!(
            "{:<6} {:<10} {:>12} {:>12}\n",
            "class", "metric", "mean", "mean_std"
        ));
        for class_agg in &self.classes {
            for (idx, metric) in Metric::ALL.into_iter().enumerate() {
                let agg = class_agg.aggregates[idx];
                out.push_str(&format!(
                    "{:<6} {:<10} {:>12} {:>12}\n",
                    class_agg.class.name(),
                    metric.name(),
                    fmt_value(agg.mean),
                    fmt_value(agg.mean_std)
                ));
            }
        }
        out
    }
}

/// Serialized per-image record; one line per image and class, metrics left
/// empty when undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetricsRecord {
    pub image: String,
    pub fold: usize,
    pub class: String,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub iou: Option<f64>,
    pub dice: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

impl From<&ImageMetrics> for ImageMetricsRecord {
    fn from(row: &ImageMetrics) -> Self {
        ImageMetricsRecord {
            image: row.image.clone(),
            fold: row.fold,
            class: row.class.name().to_string(),
            tp: row.counts.tp,
            fp: row.counts.fp,
            fn_: row.counts.fn_,
            tn: row.counts.tn,
            iou: row.counts.iou(),
            dice: row.counts.dice(),
            precision: row.counts.precision(),
            recall: row.counts.recall(),
        }
    }
}

/// CSV rendering of the per-image rows (exact counts plus derived metrics).
pub fn per_image_csv(rows: &[ImageMetrics]) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer
            .serialize(ImageMetricsRecord::from(row))
            .expect("record serialization cannot fail");
    }
    String::from_utf8(writer.into_inner().expect("in-memory writer")).expect("csv is utf8")
}

/// Parse a per-image CSV back into records, e.g. to recompute aggregates.
pub fn parse_per_image_csv(text: &str) -> Result<Vec<ImageMetricsRecord>, csv::Error> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    reader.deserialize().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{generate_mtp_mfp, BinaryMask};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn label_mask(w: u32, h: u32, entries: &[(u32, u32, u8)]) -> LabelMask {
        let mut mask = LabelMask::new(w, h).unwrap();
        for &(x, y, label) in entries {
            mask.set(x, y, label);
        }
        mask
    }

    #[test]
    fn confusion_hand_counts() {
        let pred = label_mask(2, 2, &[(0, 0, 1), (0, 1, 1)]);
        let target = label_mask(2, 2, &[(0, 1, 1), (1, 1, 1)]);
        let c = confusion(&pred, &target, 1).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (1, 1, 1, 1));
        assert_eq!(c.total(), 4);

        let same = confusion(&pred, &pred, 1).unwrap();
        assert_eq!((same.fp, same.fn_), (0, 0));

        let none = LabelMask::new(2, 2).unwrap();
        let all = label_mask(2, 2, &[(0, 0, 1), (1, 0, 1), (0, 1, 1), (1, 1, 1)]);
        let c = confusion(&none, &all, 1).unwrap();
        assert_eq!((c.tp, c.fn_), (0, 4));
    }

    #[test]
    fn metric_formulas_and_undefined_marking() {
        let c = ConfusionCounts {
            tp: 1,
            fp: 1,
            fn_: 1,
            tn: 0,
        };
        assert_eq!(c.iou(), Some(1.0 / 3.0));
        assert_eq!(c.dice(), Some(0.5));
        assert_eq!(c.precision(), Some(0.5));
        assert_eq!(c.recall(), Some(0.5));

        let perfect = ConfusionCounts {
            tp: 9,
            fp: 0,
            fn_: 0,
            tn: 1,
        };
        for metric in Metric::ALL {
            assert_eq!(perfect.metric(metric), Some(1.0));
        }

        let empty = ConfusionCounts {
            tp: 0,
            fp: 0,
            fn_: 0,
            tn: 4,
        };
        for metric in Metric::ALL {
            assert_eq!(empty.metric(metric), None);
        }
    }

    #[test]
    fn dice_iou_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let c = ConfusionCounts {
                tp: rng.random_range(0..20),
                fp: rng.random_range(0..20),
                fn_: rng.random_range(0..20),
                tn: rng.random_range(0..20),
            };
            if let (Some(iou), Some(dice)) = (c.iou(), c.dice()) {
                assert!((dice - 2.0 * iou / (1.0 + iou)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn precision_recall_monotone_in_correct_pixels() {
        let base = ConfusionCounts {
            tp: 3,
            fp: 2,
            fn_: 4,
            tn: 7,
        };
        // Turning a FN pixel into a TP: both precision and recall rise.
        let better = ConfusionCounts {
            tp: 4,
            fp: 2,
            fn_: 3,
            tn: 7,
        };
        assert!(better.precision().unwrap() >= base.precision().unwrap());
        assert!(better.recall().unwrap() >= base.recall().unwrap());
        // Turning a background pixel into a correct background stays neutral.
        let neutral = ConfusionCounts {
            tn: 8,
            ..base
        };
        assert_eq!(neutral.precision(), base.precision());
        assert_eq!(neutral.recall(), base.recall());
    }

    #[test]
    fn full_contact_ignores_subclass_swaps() {
        let pred = label_mask(2, 2, &[(0, 0, 1), (1, 0, 2)]);
        let target = label_mask(2, 2, &[(0, 0, 2), (1, 0, 1)]);
        let c = full_contact_metrics(&pred, &target).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (2, 0, 0, 2));

        let none = LabelMask::new(2, 2).unwrap();
        let c = full_contact_metrics(&none, &target).unwrap();
        assert_eq!((c.tp, c.fp), (0, 0));
    }

    #[test]
    fn full_contact_equals_union_mask_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let random_label = |rng: &mut ChaCha8Rng| {
                let mut m = LabelMask::new(9, 7).unwrap();
                for y in 0..7 {
                    for x in 0..9 {
                        m.set(x, y, rng.random_range(0..3));
                    }
                }
                m
            };
            let pred = random_label(&mut rng);
            let target = random_label(&mut rng);
            let fast = full_contact_metrics(&pred, &target).unwrap();
            // Oracle: explicit union of the class masks, then binary counts.
            let union = |m: &LabelMask| -> BinaryMask {
                m.class_mask(1).union(&m.class_mask(2)).unwrap()
            };
            let oracle = confusion_binary(&union(&pred), &union(&target)).unwrap();
            assert_eq!(fast, oracle);
        }
    }

    #[test]
    fn full_contact_agrees_with_mask_pipeline_union() {
        // The generated label mask's FULL class is AP itself.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut random_mask = |w: u32, h: u32| {
            let mut m = BinaryMask::new(w, h).unwrap();
            for y in 0..h {
                for x in 0..w {
                    m.set(x, y, rng.random_bool(0.4));
                }
            }
            m
        };
        let ap = random_mask(8, 8);
        let td = random_mask(8, 8);
        let rd = random_mask(8, 8);
        let label = generate_mtp_mfp(&ap, &td, &rd).unwrap();
        let c = full_contact_metrics(&label, &label).unwrap();
        assert_eq!(c.tp, ap.count_positives() as u64);
        assert_eq!((c.fp, c.fn_), (0, 0));
    }

    fn fixture_rows() -> Vec<ImageMetrics> {
        // Two folds, three images, single class; values chosen for hand
        // computation: IoU 0.5 / 0.7 / 0.9.
        let entries = [
            ("a", 0, ConfusionCounts { tp: 2, fp: 2, fn_: 0, tn: 12 }),
            ("b", 0, ConfusionCounts { tp: 7, fp: 3, fn_: 0, tn: 6 }),
            ("c", 1, ConfusionCounts { tp: 9, fp: 1, fn_: 0, tn: 6 }),
        ];
        let mut rows = Vec::new();
        for (image, fold, counts) in entries {
            for class in EvalClass::ALL {
                rows.push(ImageMetrics {
                    image: image.to_string(),
                    fold,
                    class,
                    counts,
                });
            }
        }
        rows
    }

    #[test]
    fn aggregate_folds_matches_hand_calculation() {
        let report = aggregate_folds(fixture_rows(), 2).unwrap();
        let iou = report.aggregate(EvalClass::Full, Metric::Iou);
        // fold0: mean 0.6, sample std sqrt(0.02); fold1: mean 0.9, std 0.
        assert!((iou.mean.unwrap() - 0.75).abs() < 1e-12);
        assert!((iou.mean_std.unwrap() - 0.070_710_678_118_654_74).abs() < 1e-12);

        let dice = report.aggregate(EvalClass::Mtp, Metric::Dice);
        assert!((dice.mean.unwrap() - 0.846_233_230_134_158_9).abs() < 1e-12);
        assert!((dice.mean_std.unwrap() - 0.055_459_355_387_180_2).abs() < 1e-12);

        let precision = report.aggregate(EvalClass::Mfp, Metric::Precision);
        assert!((precision.mean.unwrap() - 0.75).abs() < 1e-12);

        let recall = report.aggregate(EvalClass::Full, Metric::Recall);
        assert!((recall.mean.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(recall.mean_std, Some(0.0));
    }

    #[test]
    fn identical_folds_collapse_to_single_fold_stats() {
        let counts = ConfusionCounts { tp: 3, fp: 1, fn_: 2, tn: 4 };
        let mut rows = Vec::new();
        for fold in 0..2 {
            for image in ["x", "y"] {
                rows.push(ImageMetrics {
                    image: format!("{image}{fold}"),
                    fold,
                    class: EvalClass::Full,
                    counts,
                });
            }
        }
        let report = aggregate_folds(rows, 2).unwrap();
        let agg = report.aggregate(EvalClass::Full, Metric::Iou);
        assert!((agg.mean.unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(agg.mean_std, Some(0.0));
    }

    #[test]
    fn single_image_folds_have_zero_std() {
        let rows = vec![
            ImageMetrics {
                image: "a".into(),
                fold: 0,
                class: EvalClass::Full,
                counts: ConfusionCounts { tp: 1, fp: 0, fn_: 0, tn: 3 },
            },
            ImageMetrics {
                image: "b".into(),
                fold: 1,
                class: EvalClass::Full,
                counts: ConfusionCounts { tp: 1, fp: 1, fn_: 0, tn: 2 },
            },
        ];
        let report = aggregate_folds(rows, 2).unwrap();
        let agg = report.aggregate(EvalClass::Full, Metric::Iou);
        assert_eq!(agg.mean_std, Some(0.0));
        // Undefined-marked classes: MTP/MFP never appear in these rows.
        assert_eq!(report.aggregate(EvalClass::Mtp, Metric::Iou).mean, None);
    }

    #[test]
    fn empty_fold_is_a_configuration_error() {
        let rows = vec![ImageMetrics {
            image: "a".into(),
            fold: 0,
            class: EvalClass::Full,
            counts: ConfusionCounts { tp: 1, fp: 0, fn_: 0, tn: 0 },
        }];
        assert_eq!(
            aggregate_folds(rows.clone(), 2).unwrap_err(),
            MetricsError::EmptyFold(1)
        );
        assert!(matches!(
            aggregate_folds(
                vec![ImageMetrics {
                    fold: 5,
                    ..rows[0].clone()
                }],
                2
            ),
            Err(MetricsError::FoldOutOfRange { .. })
        ));
    }

    #[test]
    fn report_table_has_a_row_per_class_and_metric() {
        let report = aggregate_folds(fixture_rows(), 2).unwrap();
        let table = report.render_table();
        // Header plus 3 classes x 4 metrics.
        assert_eq!(table.lines().count(), 1 + 12);
    }

    #[test]
    fn per_image_csv_round_trips() {
        let rows = fixture_rows();
        let csv_text = per_image_csv(&rows);
        let parsed = parse_per_image_csv(&csv_text).unwrap();
        assert_eq!(parsed.len(), rows.len());
        for (rec, row) in parsed.iter().zip(&rows) {
            assert_eq!(rec.image, row.image);
            assert_eq!(rec.tp, row.counts.tp);
            assert_eq!(rec.iou, row.counts.iou());
        }
    }
}
