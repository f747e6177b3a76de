//! Segmentation and detection evaluation: pixel accuracy, IoU/mIoU,
//! all-point-interpolated AP, and Table-style reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{AnnotationError, AnnotationSet, BinaryMask, DefectClass, Rect, Task};
use crate::backend::Prediction;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("every IoU term is undefined")]
    AllUndefined,
    #[error("no ground-truth boxes")]
    NoGroundTruth,
    #[error("no prediction for test image {0}")]
    MissingPrediction(String),
    #[error("no values to aggregate")]
    Empty,
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
}

fn check_dims(a: &BinaryMask, b: &BinaryMask) -> Result<(), MetricsError> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(MetricsError::DimensionMismatch(a.width(), a.height(), b.width(), b.height()))
    }
}

pub fn pixel_accuracy(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, MetricsError> {
    check_dims(pred, gt)?;
    let n = pred.bits().len();
    if n == 0 {
        return Ok(1.0);
    }
    let agree = pred.bits().iter().zip(gt.bits()).filter(|(a, b)| a == b).count();
    Ok(agree as f64 / n as f64)
}

/// IoU of two masks; `None` when both are empty.
pub fn class_iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<Option<f64>, MetricsError> {
    check_dims(pred, gt)?;
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        inter += (p && g) as u64;
        union += (p || g) as u64;
    }
    Ok((union > 0).then(|| inter as f64 / union as f64))
}

/// Mean over the defined IoU terms.
pub fn mean_iou(ious: &[Option<f64>]) -> Result<f64, MetricsError> {
    let defined: Vec<f64> = ious.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(MetricsError::AllUndefined);
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

pub fn box_iou(a: &Rect, b: &Rect) -> f64 {
    a.iou(b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredBox {
    pub image_id: String,
    pub rect: Rect,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthBox {
    pub image_id: String,
    pub rect: Rect,
}

/// Area under the precision envelope over recall (all-point interpolation).
///
/// Detections are ranked by descending score (ties by ascending box tuple,
/// then image id) and each is matched to the highest-IoU still-unmatched
/// ground truth of its image with IoU at or above `iou_threshold`.
pub fn average_precision(detections: &[ScoredBox], gts: &[GroundTruthBox], iou_threshold: f64) -> Result<f64, MetricsError> {
    if gts.is_empty() {
        return Err(MetricsError::NoGroundTruth);
    }
    let mut order: Vec<&ScoredBox> = detections.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.rect.cmp(&b.rect))
            .then_with(|| a.image_id.cmp(&b.image_id))
    });
    let mut by_image: BTreeMap<&str, Vec<(Rect, bool)>> = BTreeMap::new();
    for g in gts {
        by_image.entry(g.image_id.as_str()).or_default().push((g.rect, false));
    }
    let total = gts.len() as f64;
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(order.len());
    for (rank, det) in order.iter().enumerate() {
        if let Some(cands) = by_image.get_mut(det.image_id.as_str()) {
            let best = cands
                .iter()
                .enumerate()
                .filter(|(_, (_, used))| !used)
                .map(|(i, (r, _))| (i, r.iou(&det.rect)))
                .filter(|&(_, iou)| iou >= iou_threshold)
                .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
            if let Some((i, _)) = best {
                cands[i].1 = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / total, tp as f64 / (rank + 1) as f64));
    }
    // envelope: running max of precision from the right
    let mut envelope = points.iter().map(|p| p.1).collect::<Vec<_>>();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(recall, _)) in points.iter().enumerate() {
        if recall > prev_recall {
            ap += (recall - prev_recall) * envelope[i];
            prev_recall = recall;
        }
    }
    Ok(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "mAP")]
    MeanAveragePrecision,
    #[serde(rename = "mIoU")]
    MeanIou,
}

impl MetricKind {
    pub fn for_class(class: DefectClass) -> Self {
        match class.task() {
            Task::Detection => MetricKind::MeanAveragePrecision,
            Task::Segmentation => MetricKind::MeanIou,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetric {
    pub metric_kind: MetricKind,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset_id: String,
    pub resolution: u32,
    pub dataset_size: usize,
    pub per_class: BTreeMap<DefectClass, ClassMetric>,
    pub pixel_accuracy: f64,
    pub mean_accuracy: f64,
}

pub const REPORT_CSV_HEADER: &str = "dataset_size,resolution,center_map,poly_miou,edge_map,mean";

impl MetricsReport {
    /// Builds a report from per-class values; the mean is the unweighted mean
    /// of whichever classes are present.
    pub fn from_class_values(
        dataset_id: impl Into<String>,
        resolution: u32,
        dataset_size: usize,
        values: &BTreeMap<DefectClass, f64>,
        pixel_accuracy: f64,
    ) -> Result<Self, MetricsError> {
        let per_class: BTreeMap<DefectClass, ClassMetric> = values
            .iter()
            .map(|(&c, &v)| {
                (
                    c,
                    ClassMetric {
                        metric_kind: MetricKind::for_class(c),
                        value: v,
                    },
                )
            })
            .collect();
        let mean_accuracy = aggregate_mean(&values.values().copied().collect::<Vec<_>>())?;
        Ok(MetricsReport {
            dataset_id: dataset_id.into(),
            resolution,
            dataset_size,
            per_class,
            pixel_accuracy,
            mean_accuracy,
        })
    }

    pub fn value(&self, class: DefectClass) -> Option<f64> {
        self.per_class.get(&class).map(|m| m.value)
    }

    /// One CSV row matching [`REPORT_CSV_HEADER`]; absent classes leave an empty cell.
    pub fn csv_row(&self) -> String {
        let cell = |c| self.value(c).map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{:.6}",
            self.dataset_size,
            self.resolution,
            cell(DefectClass::CenterDefect),
            cell(DefectClass::PolycrystallineDefect),
            cell(DefectClass::EdgeDefect),
            self.mean_accuracy
        )
    }
}

/// Unweighted mean of per-class values.
pub fn aggregate_mean(values: &[f64]) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

pub fn report_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    /// Pixels with probability strictly above this are foreground.
    pub probability_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: 0.5,
            probability_threshold: 0.5,
        }
    }
}

/// Ground truth of one test image.
#[derive(Debug, Clone)]
pub struct TestSample {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub ground_truth: AnnotationSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricsReport,
    /// Mean over the classes defined on each image.
    pub per_image: BTreeMap<String, f64>,
}

pub fn binarize(pred: &Prediction, class: DefectClass, width: u32, height: u32, threshold: f64) -> BinaryMask {
    match pred.probability_maps.get(&class) {
        Some(map) if map.width == width && map.height == height => {
            BinaryMask::from_bits(width, height, map.values.iter().map(|&p| p > threshold).collect())
        }
        _ => BinaryMask::new(width, height),
    }
}

fn detections_of(pred: &Prediction, class: DefectClass) -> Vec<ScoredBox> {
    pred.boxes
        .iter()
        .filter(|b| b.class == class)
        .map(|b| ScoredBox {
            image_id: pred.image_id.clone(),
            rect: b.rect(),
            score: b.score.unwrap_or(0.0),
        })
        .collect()
}

fn gts_of(sample: &TestSample, class: DefectClass) -> Vec<GroundTruthBox> {
    sample
        .ground_truth
        .boxes_for(class)
        .map(|b| GroundTruthBox {
            image_id: sample.image_id.clone(),
            rect: b.rect(),
        })
        .collect()
}

/// Detection AP with the empty cases resolved: `None` when neither ground
/// truth nor detections exist, 0 when only detections exist.
fn detection_value(dets: &[ScoredBox], gts: &[GroundTruthBox], thr: f64) -> Result<Option<f64>, MetricsError> {
    match (gts.is_empty(), dets.is_empty()) {
        (true, true) => Ok(None),
        (true, false) => Ok(Some(0.0)),
        _ => average_precision(dets, gts, thr).map(Some),
    }
}

/// Scores predictions over a labeled test set. Images are reduced in id order.
pub fn evaluate(
    dataset_id: &str,
    resolution: u32,
    dataset_size: usize,
    predictions: &BTreeMap<String, Prediction>,
    testset: &[TestSample],
    config: &EvalConfig,
) -> Result<Evaluation, MetricsError> {
    let mut samples: Vec<&TestSample> = testset.iter().collect();
    samples.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    for s in &samples {
        if !predictions.contains_key(&s.image_id) {
            return Err(MetricsError::MissingPrediction(s.image_id.clone()));
        }
    }

    let mut ious: BTreeMap<DefectClass, Vec<Option<f64>>> = BTreeMap::new();
    let mut pixel_acc = Vec::new();
    let mut dets: BTreeMap<DefectClass, Vec<ScoredBox>> = BTreeMap::new();
    let mut gts: BTreeMap<DefectClass, Vec<GroundTruthBox>> = BTreeMap::new();
    let mut per_image = BTreeMap::new();

    for s in &samples {
        let pred = &predictions[&s.image_id];
        let mut image_terms = Vec::new();
        for class in DefectClass::segmentation_classes() {
            let p = binarize(pred, class, s.width, s.height, config.probability_threshold);
            let g = s.ground_truth.mask_or_empty(class, s.width, s.height)?;
            pixel_acc.push(pixel_accuracy(&p, &g)?);
            let iou = class_iou(&p, &g)?;
            image_terms.extend(iou);
            ious.entry(class).or_default().push(iou);
        }
        for class in DefectClass::detection_classes() {
            let d = detections_of(pred, class);
            let g = gts_of(s, class);
            image_terms.extend(detection_value(&d, &g, config.iou_threshold)?);
            dets.entry(class).or_default().extend(d);
            gts.entry(class).or_default().extend(g);
        }
        let acc = if image_terms.is_empty() {
            1.0
        } else {
            image_terms.iter().sum::<f64>() / image_terms.len() as f64
        };
        per_image.insert(s.image_id.clone(), acc);
    }

    let mut values = BTreeMap::new();
    for (class, terms) in &ious {
        match mean_iou(terms) {
            Ok(v) => {
                values.insert(*class, v);
            }
            Err(MetricsError::AllUndefined) => {}
            Err(e) => return Err(e),
        }
    }
    for class in DefectClass::detection_classes() {
        let d = dets.remove(&class).unwrap_or_default();
        let g = gts.remove(&class).unwrap_or_default();
        if let Some(v) = detection_value(&d, &g, config.iou_threshold)? {
            values.insert(class, v);
        }
    }
    let pixel_accuracy = if pixel_acc.is_empty() {
        1.0
    } else {
        pixel_acc.iter().sum::<f64>() / pixel_acc.len() as f64
    };
    let report = if values.is_empty() {
        // nothing to detect and nothing predicted anywhere
        MetricsReport {
            dataset_id: dataset_id.to_string(),
            resolution,
            dataset_size,
            per_class: BTreeMap::new(),
            pixel_accuracy,
            mean_accuracy: 1.0,
        }
    } else {
        MetricsReport::from_class_values(dataset_id, resolution, dataset_size, &values, pixel_accuracy)?
    };
    Ok(Evaluation { report, per_image })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{BoxAnnotation, MaskAnnotation, Source};
    use crate::backend::ProbabilityMap;

    #[test]
    fn pixel_accuracy_examples() {
        let g = BinaryMask::from_bits(2, 2, vec![true, false, false, true]);
        assert_eq!(pixel_accuracy(&g, &g).unwrap(), 1.0);
        assert_eq!(pixel_accuracy(&g.complement(), &g).unwrap(), 0.0);
        let p = BinaryMask::from_bits(2, 2, vec![true, true, false, true]);
        assert_eq!(pixel_accuracy(&p, &g).unwrap(), 0.75);
        assert!(matches!(pixel_accuracy(&BinaryMask::new(2, 3), &g), Err(MetricsError::DimensionMismatch(..))));
    }

    #[test]
    fn class_iou_examples() {
        let g = BinaryMask::from_bits(2, 2, vec![true, false, false, true]);
        assert_eq!(class_iou(&g, &g).unwrap(), Some(1.0));
        assert_eq!(class_iou(&g.complement(), &g).unwrap(), Some(0.0));
        assert_eq!(class_iou(&BinaryMask::new(3, 3), &BinaryMask::new(3, 3)).unwrap(), None);
        // 2x2 blocks at columns 0..2 and 1..3 on a 3-wide, 2-high grid
        let a = BinaryMask::from_fn(3, 2, |c, _| c < 2);
        let b = BinaryMask::from_fn(3, 2, |c, _| c >= 1);
        let iou = class_iou(&a, &b).unwrap().unwrap();
        // intersection is column 1 (2 px); union is the full 6 px grid
        assert!((iou - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn mean_iou_examples() {
        assert_eq!(mean_iou(&[Some(1.0), Some(0.5)]).unwrap(), 0.75);
        assert_eq!(mean_iou(&[Some(0.5), None]).unwrap(), 0.5);
        assert!(matches!(mean_iou(&[None, None]), Err(MetricsError::AllUndefined)));
    }

    #[test]
    fn box_iou_examples() {
        let a = Rect::new(0, 0, 2, 2);
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_iou(&a, &Rect::new(2, 0, 2, 2)), 0.0);
        assert!((box_iou(&a, &Rect::new(1, 0, 2, 2)) - 1.0 / 3.0).abs() < 1e-12);
    }

    fn sb(img: &str, r: Rect, s: f64) -> ScoredBox {
        ScoredBox {
            image_id: img.into(),
            rect: r,
            score: s,
        }
    }

    fn gt(img: &str, r: Rect) -> GroundTruthBox {
        GroundTruthBox {
            image_id: img.into(),
            rect: r,
        }
    }

    #[test]
    fn ap_examples() {
        let g = [gt("a", Rect::new(0, 0, 10, 10))];
        assert_eq!(average_precision(&[sb("a", Rect::new(0, 0, 10, 10), 0.9)], &g, 0.5).unwrap(), 1.0);
        assert_eq!(average_precision(&[sb("a", Rect::new(8, 8, 10, 10), 0.9)], &g, 0.5).unwrap(), 0.0);
        let dets = [sb("a", Rect::new(50, 50, 5, 5), 0.9), sb("a", Rect::new(0, 0, 10, 10), 0.8)];
        assert_eq!(average_precision(&dets, &g, 0.5).unwrap(), 0.5);
        assert!(matches!(average_precision(&dets, &[], 0.5), Err(MetricsError::NoGroundTruth)));
        // a detection on another image never matches
        assert_eq!(average_precision(&[sb("b", Rect::new(0, 0, 10, 10), 0.9)], &g, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn aggregation_reproduces_table_mean() {
        let values: BTreeMap<DefectClass, f64> = [
            (DefectClass::CenterDefect, 0.9335),
            (DefectClass::PolycrystallineDefect, 0.9283),
            (DefectClass::EdgeDefect, 0.9198),
        ]
        .into_iter()
        .collect();
        let r = MetricsReport::from_class_values("t1", 512, 3000, &values, 0.99).unwrap();
        assert!((r.mean_accuracy - 0.9272).abs() <= 1e-4);
        assert_eq!(r.per_class[&DefectClass::CenterDefect].metric_kind, MetricKind::MeanAveragePrecision);
        assert_eq!(r.per_class[&DefectClass::PolycrystallineDefect].metric_kind, MetricKind::MeanIou);
        assert_eq!(r.csv_row(), "3000,512,0.933500,0.928300,0.919800,0.927200");
    }

    fn sample(id: &str) -> (TestSample, Prediction) {
        let mut gt = AnnotationSet::blank(id, Source::Consensus);
        let mask = BinaryMask::from_fn(8, 8, |c, r| c < 3 && r < 3);
        gt.set_mask(MaskAnnotation::from_mask(DefectClass::PolycrystallineDefect, &mask));
        gt.boxes.push(BoxAnnotation::new(DefectClass::CenterDefect, Rect::new(4, 4, 2, 2)));
        gt.boxes.push(BoxAnnotation::new(DefectClass::EdgeDefect, Rect::new(0, 6, 3, 2)));
        let mut pred = Prediction::empty(id);
        pred.probability_maps.insert(
            DefectClass::PolycrystallineDefect,
            ProbabilityMap::new(8, 8, mask.bits().iter().map(|&b| if b { 0.9 } else { 0.1 }).collect()),
        );
        for b in &gt.boxes {
            pred.boxes.push(BoxAnnotation::scored(b.class, b.rect(), 0.8));
        }
        (
            TestSample {
                image_id: id.into(),
                width: 8,
                height: 8,
                ground_truth: gt,
            },
            pred,
        )
    }

    #[test]
    fn evaluate_perfect_and_missing() {
        let (s1, p1) = sample("a");
        let (s2, p2) = sample("b");
        let preds: BTreeMap<_, _> = [("a".to_string(), p1), ("b".to_string(), p2)].into_iter().collect();
        let ev = evaluate("ds", 8, 2, &preds, &[s1.clone(), s2.clone()], &EvalConfig::default()).unwrap();
        for c in DefectClass::ALL {
            assert_eq!(ev.report.value(c), Some(1.0));
        }
        assert_eq!(ev.report.mean_accuracy, 1.0);
        assert_eq!(ev.report.pixel_accuracy, 1.0);
        assert!(ev.per_image.values().all(|&v| v == 1.0));

        let mut missing = preds.clone();
        missing.remove("b");
        assert!(matches!(
            evaluate("ds", 8, 2, &missing, &[s1, s2], &EvalConfig::default()),
            Err(MetricsError::MissingPrediction(id)) if id == "b"
        ));
    }

    #[test]
    fn evaluate_excludes_absent_classes() {
        let mut gt = AnnotationSet::blank("a", Source::Consensus);
        gt.boxes.push(BoxAnnotation::new(DefectClass::CenterDefect, Rect::new(1, 1, 2, 2)));
        let s = TestSample {
            image_id: "a".into(),
            width: 4,
            height: 4,
            ground_truth: gt,
        };
        let mut p = Prediction::empty("a");
        p.boxes.push(BoxAnnotation::scored(DefectClass::CenterDefect, Rect::new(1, 1, 2, 2), 0.7));
        let preds: BTreeMap<_, _> = [("a".to_string(), p)].into_iter().collect();
        let ev = evaluate("ds", 4, 1, &preds, &[s], &EvalConfig::default()).unwrap();
        assert_eq!(ev.report.per_class.len(), 1);
        assert_eq!(ev.report.mean_accuracy, 1.0);
    }
}
