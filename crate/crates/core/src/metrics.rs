//! Detection evaluation at a single IoU threshold.
//!
//! Ordering by confidence is always a stable descending sort, so equal scores
//! keep their input order.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::boxes::iou;
use crate::boxes::{BoxLabel, ClassId};
use crate::detector::{filter_confidence, Detection};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("class {0} has no ground truth")]
    NoGroundTruth(ClassId),
    #[error("class filter is empty")]
    EmptyFilter,
    #[error("none of the filtered classes has ground truth")]
    NothingToAverage,
    #[error("threshold {0} is outside [0, 1]")]
    Threshold(f64),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

fn by_confidence<T>(items: &[T], conf: impl Fn(&T) -> f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| conf(&items[b]).total_cmp(&conf(&items[a])));
    order
}

/// Greedy per-class suppression: walking in confidence order, a detection is
/// dropped when it overlaps an already kept one of its class by more than
/// `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in by_confidence(dets, |d| d.confidence) {
        let d = &dets[i];
        if !kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_threshold)
        {
            kept.push(*d);
        }
    }
    kept
}

/// A detection tagged with the frame it was made on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameDetection {
    pub frame: usize,
    pub detection: Detection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    pub frame: usize,
    pub label: BoxLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionOutcome {
    /// Position in the input detection list.
    pub index: usize,
    pub class_id: ClassId,
    pub confidence: f64,
    /// Index of the matched ground truth; `None` marks a false positive.
    pub truth: Option<usize>,
}

impl DetectionOutcome {
    pub fn is_tp(&self) -> bool {
        self.truth.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    /// Detections in descending confidence order.
    pub detections: Vec<DetectionOutcome>,
    pub truth_counts: BTreeMap<ClassId, usize>,
}

impl MatchResult {
    /// The same result seen through a single class.
    pub fn for_class(&self, class_id: ClassId) -> MatchResult {
        MatchResult {
            detections: self
                .detections
                .iter()
                .filter(|d| d.class_id == class_id)
                .copied()
                .collect(),
            truth_counts: self
                .truth_counts
                .get(&class_id)
                .map(|&n| BTreeMap::from([(class_id, n)]))
                .unwrap_or_default(),
        }
    }

    pub fn true_positives(&self) -> usize {
        self.detections.iter().filter(|d| d.is_tp()).count()
    }

    pub fn truth_total(&self) -> usize {
        self.truth_counts.values().sum()
    }

    /// Classes seen among detections or truths.
    pub fn classes(&self) -> BTreeSet<ClassId> {
        self.detections
            .iter()
            .map(|d| d.class_id)
            .chain(self.truth_counts.keys().copied())
            .collect()
    }
}

/// Greedy matching in descending confidence: each detection takes the
/// unmatched same-class truth of its frame with the highest IoU (first one
/// on ties) and is a true positive when that IoU reaches `iou_threshold`.
pub fn match_detections(
    dets: &[FrameDetection],
    truths: &[FrameTruth],
    iou_threshold: f64,
) -> MatchResult {
    let mut truth_counts = BTreeMap::new();
    for t in truths {
        *truth_counts.entry(t.label.class_id).or_insert(0) += 1;
    }
    let mut taken = vec![false; truths.len()];
    let detections = by_confidence(dets, |d| d.detection.confidence)
        .into_iter()
        .map(|i| {
            let d = &dets[i];
            let mut best: Option<(usize, f64)> = None;
            for (j, t) in truths.iter().enumerate() {
                if taken[j] || t.frame != d.frame || t.label.class_id != d.detection.class_id {
                    continue;
                }
                let o = iou(&d.detection.bbox, &t.label.bbox);
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            let truth = best.filter(|&(_, o)| o >= iou_threshold).map(|(j, _)| j);
            if let Some(j) = truth {
                taken[j] = true;
            }
            DetectionOutcome {
                index: i,
                class_id: d.detection.class_id,
                confidence: d.detection.confidence,
                truth,
            }
        })
        .collect();
    MatchResult {
        detections,
        truth_counts,
    }
}

/// `(precision, recall)`; precision is 1 with no detections and recall is 1
/// with no truths.
pub fn precision_recall(m: &MatchResult) -> (f64, f64) {
    let tp = m.true_positives() as f64;
    let precision = if m.detections.is_empty() {
        1.0
    } else {
        tp / m.detections.len() as f64
    };
    let truths = m.truth_total();
    let recall = if truths == 0 { 1.0 } else { tp / truths as f64 };
    (precision, recall)
}

/// All-point interpolated AP: precision is replaced by its maximum at equal
/// or higher recall and integrated over recall.
pub fn average_precision(m: &MatchResult, class_id: ClassId) -> Result<f64> {
    let g = match m.truth_counts.get(&class_id) {
        Some(&n) if n > 0 => n as f64,
        _ => return Err(MetricsError::NoGroundTruth(class_id)),
    };
    let mut tp = 0usize;
    let mut points = Vec::new();
    for (rank, d) in m
        .detections
        .iter()
        .filter(|d| d.class_id == class_id)
        .enumerate()
    {
        tp += d.is_tp() as usize;
        points.push((tp as f64 / (rank + 1) as f64, tp as f64 / g));
    }
    let mut envelope = vec![0.0; points.len()];
    let mut running = 0.0f64;
    for i in (0..points.len()).rev() {
        running = running.max(points[i].0);
        envelope[i] = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (&(_, r), &p) in points.iter().zip(&envelope) {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    Ok(ap)
}

/// AP for every class with ground truth, plus the detected classes that had
/// none and were therefore skipped.
pub fn class_aps(m: &MatchResult) -> (BTreeMap<ClassId, f64>, Vec<ClassId>) {
    let mut aps = BTreeMap::new();
    let mut skipped = Vec::new();
    for c in m.classes() {
        match average_precision(m, c) {
            Ok(ap) => {
                aps.insert(c, ap);
            }
            Err(_) => skipped.push(c),
        }
    }
    (aps, skipped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanAp {
    pub value: f64,
    pub included: Vec<ClassId>,
    /// Filtered classes left out for lack of ground truth.
    pub excluded: Vec<ClassId>,
}

/// Unweighted mean of the APs of `filter`'s classes that have ground truth.
pub fn mean_ap(aps: &BTreeMap<ClassId, f64>, filter: &[ClassId]) -> Result<MeanAp> {
    if filter.is_empty() {
        return Err(MetricsError::EmptyFilter);
    }
    let wanted: BTreeSet<ClassId> = filter.iter().copied().collect();
    let (included, excluded): (Vec<ClassId>, Vec<ClassId>) =
        wanted.into_iter().partition(|c| aps.contains_key(c));
    if included.is_empty() {
        return Err(MetricsError::NothingToAverage);
    }
    let value = included.iter().map(|c| aps[c]).sum::<f64>() / included.len() as f64;
    Ok(MeanAp {
        value,
        included,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Detections scoring below this are discarded before NMS.
    pub confidence_threshold: f64,
    #[serde(default = "half")]
    pub nms_iou: f64,
    #[serde(default = "half")]
    pub match_iou: f64,
}

fn half() -> f64 {
    0.5
}

impl EvalConfig {
    pub fn new(confidence_threshold: f64) -> Self {
        Self {
            confidence_threshold,
            nms_iou: 0.5,
            match_iou: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for t in [self.confidence_threshold, self.nms_iou, self.match_iou] {
            if !(0.0..=1.0).contains(&t) {
                return Err(MetricsError::Threshold(t));
            }
        }
        Ok(())
    }
}

/// Raw detections and truths of one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameRecord {
    pub detections: Vec<Detection>,
    pub truths: Vec<BoxLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: ClassId,
    pub ap: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub truths: usize,
    pub detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub classes: Vec<ClassReport>,
    pub class_aps: BTreeMap<ClassId, f64>,
    pub matches: MatchResult,
}

impl EvalReport {
    pub fn mean_ap(&self, filter: &[ClassId]) -> Result<MeanAp> {
        mean_ap(&self.class_aps, filter)
    }

    /// Precision and recall pooled over the classes in `filter`.
    pub fn precision_recall_over(&self, filter: &[ClassId]) -> (f64, f64) {
        let wanted: BTreeSet<ClassId> = filter.iter().copied().collect();
        let m = MatchResult {
            detections: self
                .matches
                .detections
                .iter()
                .filter(|d| wanted.contains(&d.class_id))
                .copied()
                .collect(),
            truth_counts: self
                .matches
                .truth_counts
                .iter()
                .filter(|(c, _)| wanted.contains(c))
                .map(|(&c, &n)| (c, n))
                .collect(),
        };
        precision_recall(&m)
    }
}

/// Confidence filter, per-frame NMS, matching and per-class AP.
pub fn evaluate(frames: &[FrameRecord], config: &EvalConfig) -> Result<EvalReport> {
    config.validate()?;
    let mut dets = Vec::new();
    let mut truths = Vec::new();
    for (frame, r) in frames.iter().enumerate() {
        let kept = nms(
            &filter_confidence(&r.detections, config.confidence_threshold),
            config.nms_iou,
        );
        dets.extend(
            kept.into_iter()
                .map(|detection| FrameDetection { frame, detection }),
        );
        truths.extend(r.truths.iter().map(|&label| FrameTruth { frame, label }));
    }
    let matches = match_detections(&dets, &truths, config.match_iou);
    let (precision, recall) = precision_recall(&matches);
    let (class_aps, _) = class_aps(&matches);
    let classes = matches
        .classes()
        .into_iter()
        .map(|c| {
            let m = matches.for_class(c);
            let (precision, recall) = precision_recall(&m);
            ClassReport {
                class_id: c,
                ap: class_aps.get(&c).copied(),
                precision,
                recall,
                truths: m.truth_total(),
                detections: m.detections.len(),
            }
        })
        .collect();
    Ok(EvalReport {
        precision,
        recall,
        classes,
        class_aps,
        matches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::BBox;
    use proptest::prelude::*;

    fn det(class_id: ClassId, confidence: f64, bbox: BBox) -> Detection {
        Detection {
            bbox,
            class_id,
            confidence,
        }
    }

    fn unit() -> BBox {
        BBox::new(0.5, 0.5, 0.2, 0.2)
    }

    fn fd(d: Detection) -> FrameDetection {
        FrameDetection {
            frame: 0,
            detection: d,
        }
    }

    fn ft(class_id: ClassId, bbox: BBox) -> FrameTruth {
        FrameTruth {
            frame: 0,
            label: BoxLabel { class_id, bbox },
        }
    }

    #[test]
    fn nms_cases() {
        let a = det(0, 0.9, unit());
        assert_eq!(nms(&[a], 0.5), vec![a]);
        let b = det(0, 0.8, unit());
        assert_eq!(nms(&[b, a], 0.5), vec![a]);
        let c = det(1, 0.8, unit());
        assert_eq!(nms(&[a, c], 0.5), vec![a, c]);
    }

    #[test]
    fn matching_cases() {
        let t = [ft(0, unit())];
        let m = match_detections(&[fd(det(0, 0.7, unit()))], &t, 0.5);
        assert_eq!(m.detections[0].truth, Some(0));

        let m = match_detections(&[fd(det(0, 0.6, unit())), fd(det(0, 0.9, unit()))], &t, 0.5);
        assert_eq!(m.detections[0].index, 1);
        assert!(m.detections[0].is_tp() && !m.detections[1].is_tp());

        // Shifted by 0.2 * 11/31 along x: overlap 0.2 * 20/31, IoU = 20/42 < 0.5.
        let shifted = BBox::new(0.5 + 0.2 * 11.0 / 31.0, 0.5, 0.2, 0.2);
        let o = iou(&shifted, &unit());
        assert!((o - 20.0 / 42.0).abs() < 1e-12 && o < 0.5 && o > 0.45);
        let m = match_detections(&[fd(det(0, 0.9, shifted))], &t, 0.5);
        assert!(!m.detections[0].is_tp());
        assert_eq!(precision_recall(&m), (0.0, 0.0));
    }

    #[test]
    fn precision_recall_conventions() {
        let outcome = |tp: bool| DetectionOutcome {
            index: 0,
            class_id: 0,
            confidence: 0.5,
            truth: tp.then_some(0),
        };
        let m = MatchResult {
            detections: vec![outcome(true), outcome(true), outcome(false), outcome(true)],
            truth_counts: BTreeMap::from([(0, 4)]),
        };
        assert_eq!(precision_recall(&m), (0.75, 0.75));
        let none = MatchResult {
            detections: vec![],
            truth_counts: BTreeMap::from([(0, 2)]),
        };
        assert_eq!(precision_recall(&none), (1.0, 0.0));
        let perfect = MatchResult {
            detections: vec![outcome(true)],
            truth_counts: BTreeMap::from([(0, 1)]),
        };
        assert_eq!(precision_recall(&perfect), (1.0, 1.0));
    }

    fn ranked(flags: &[bool], truths: usize) -> MatchResult {
        MatchResult {
            detections: flags
                .iter()
                .enumerate()
                .map(|(i, &tp)| DetectionOutcome {
                    index: i,
                    class_id: 0,
                    confidence: 1.0 - i as f64 * 0.01,
                    truth: tp.then_some(i),
                })
                .collect(),
            truth_counts: BTreeMap::from([(0, truths)]),
        }
    }

    #[test]
    fn ap_hand_cases() {
        assert_eq!(average_precision(&ranked(&[true], 1), 0), Ok(1.0));
        assert_eq!(average_precision(&ranked(&[true, false], 1), 0), Ok(1.0));
        assert_eq!(average_precision(&ranked(&[false, true], 1), 0), Ok(0.5));
        assert_eq!(average_precision(&ranked(&[], 3), 0), Ok(0.0));
        assert_eq!(
            average_precision(&ranked(&[true], 1), 4),
            Err(MetricsError::NoGroundTruth(4))
        );
    }

    #[test]
    fn mean_ap_cases() {
        let aps = BTreeMap::from([(0, 0.597)]);
        assert_eq!(mean_ap(&aps, &[0]).unwrap().value, 0.597);
        let aps = BTreeMap::from([(0, 1.0), (1, 0.0)]);
        assert_eq!(mean_ap(&aps, &[0, 1]).unwrap().value, 0.5);
        let m = mean_ap(&aps, &[0, 9]).unwrap();
        assert_eq!((m.value, m.included, m.excluded), (1.0, vec![0], vec![9]));
        assert_eq!(mean_ap(&aps, &[]), Err(MetricsError::EmptyFilter));
        assert_eq!(mean_ap(&aps, &[5]), Err(MetricsError::NothingToAverage));
    }

    #[test]
    fn evaluate_playback_is_perfect() {
        let truths = vec![
            BoxLabel::new(0, 0.3, 0.3, 0.2, 0.2),
            BoxLabel::new(2, 0.7, 0.7, 0.1, 0.3),
        ];
        let frames: Vec<FrameRecord> = (0..3)
            .map(|_| FrameRecord {
                detections: truths
                    .iter()
                    .map(|t| det(t.class_id, 1.0, t.bbox))
                    .collect(),
                truths: truths.clone(),
            })
            .collect();
        let r = evaluate(&frames, &EvalConfig::new(0.5)).unwrap();
        assert_eq!((r.precision, r.recall), (1.0, 1.0));
        assert_eq!(r.mean_ap(&[0, 2]).unwrap().value, 1.0);
    }

    fn arb_det() -> impl Strategy<Value = Detection> {
        (
            0u32..2,
            0.0f64..1.0,
            0.2f64..0.8,
            0.2f64..0.8,
            0.05f64..0.4,
            0.05f64..0.4,
        )
            .prop_map(|(c, conf, x, y, w, h)| det(c, conf, BBox::new(x, y, w, h)))
    }

    proptest! {
        #[test]
        fn nms_subset_and_idempotent(dets in prop::collection::vec(arb_det(), 0..12), t in 0.1f64..0.9) {
            let once = nms(&dets, t);
            prop_assert!(once.iter().all(|d| dets.contains(d)));
            prop_assert_eq!(nms(&once, t), once);
        }

        #[test]
        fn matches_are_unique_and_bounded(
            dets in prop::collection::vec(arb_det(), 0..10),
            truths in prop::collection::vec(arb_det(), 0..5),
        ) {
            let dets: Vec<FrameDetection> = dets.into_iter().map(fd).collect();
            let truths: Vec<FrameTruth> = truths.into_iter().map(|d| ft(d.class_id, d.bbox)).collect();
            let m = match_detections(&dets, &truths, 0.5);
            let used: Vec<usize> = m.detections.iter().filter_map(|d| d.truth).collect();
            let unique: BTreeSet<usize> = used.iter().copied().collect();
            prop_assert_eq!(used.len(), unique.len());
            for c in m.classes() {
                let sub = m.for_class(c);
                prop_assert!(sub.true_positives() <= sub.truth_total());
            }
        }

        #[test]
        fn ap_monotone_in_extra_detections(flags in prop::collection::vec(any::<bool>(), 0..10), extra in 1usize..3) {
            let g = flags.iter().filter(|&&f| f).count() + extra;
            let base = average_precision(&ranked(&flags, g), 0).unwrap();
            let mut with_fp = flags.clone();
            with_fp.push(false);
            prop_assert!(average_precision(&ranked(&with_fp, g), 0).unwrap() <= base);
            let mut with_tp = vec![true];
            with_tp.extend(&flags);
            prop_assert!(average_precision(&ranked(&with_tp, g), 0).unwrap() >= base);
        }
    }
}
