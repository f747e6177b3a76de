//! Labeling batches, multi-labeler consensus, review states, model-assisted
//! pre-annotation and correction-cost accounting.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{
    AnnotationError, AnnotationSet, BinaryMask, BoxAnnotation, DefectClass, MaskAnnotation, Rect, ReviewState, Source,
    Task,
};

pub const DEFAULT_BATCH_SIZE: usize = 100;

#[derive(Debug, Error)]
pub enum LabelingError {
    #[error("image pool is empty")]
    EmptyPool,
    #[error("annotation sets reference different images")]
    MixedImages,
    #[error("no annotation sets supplied")]
    NoSets,
    #[error("labeler {0} supplied more than one set")]
    DuplicateLabeler(String),
    #[error("mask dimensions differ between sets for {0}")]
    DimensionMismatch(DefectClass),
    #[error("illegal review transition from {from:?} via {decision:?}")]
    IllegalTransition { from: ReviewState, decision: ReviewDecision },
    #[error("illegal batch transition from {from:?} to {to:?}")]
    IllegalBatchTransition { from: BatchStatus, to: BatchStatus },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BatchStatus {
    Open,
    AwaitingConsensus,
    AwaitingExpert,
    Finalized,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelingBatch {
    pub batch_id: String,
    pub image_ids: Vec<String>,
    pub status: BatchStatus,
    pub assigned_labelers: BTreeSet<String>,
}

impl LabelingBatch {
    /// Moves forward one step, or back to `Open` from `AwaitingExpert` for relabeling.
    pub fn transition(&mut self, to: BatchStatus) -> Result<(), LabelingError> {
        use BatchStatus::*;
        let ok = matches!(
            (self.status, to),
            (Open, AwaitingConsensus) | (AwaitingConsensus, AwaitingExpert) | (AwaitingExpert, Finalized) | (AwaitingExpert, Open)
        );
        if !ok {
            return Err(LabelingError::IllegalBatchTransition { from: self.status, to });
        }
        self.status = to;
        Ok(())
    }
}

/// Takes up to `size` ids from the front of `pool`.
pub fn create_batch(batch_id: impl Into<String>, pool: &mut VecDeque<String>, size: usize) -> Result<LabelingBatch, LabelingError> {
    if pool.is_empty() {
        return Err(LabelingError::EmptyPool);
    }
    if size == 0 {
        return Err(LabelingError::InvalidParameter("batch size must be positive".into()));
    }
    let n = size.min(pool.len());
    Ok(LabelingBatch {
        batch_id: batch_id.into(),
        image_ids: pool.drain(..n).collect(),
        status: BatchStatus::Open,
        assigned_labelers: BTreeSet::new(),
    })
}

fn check_sets(sets: &[AnnotationSet]) -> Result<Vec<&AnnotationSet>, LabelingError> {
    let first = sets.first().ok_or(LabelingError::NoSets)?;
    if sets.iter().any(|s| s.image_id != first.image_id) {
        return Err(LabelingError::MixedImages);
    }
    let mut ordered: Vec<&AnnotationSet> = sets.iter().collect();
    ordered.sort_by_key(|s| s.source.key());
    for w in ordered.windows(2) {
        if w[0].source == w[1].source {
            return Err(LabelingError::DuplicateLabeler(w[0].source.key()));
        }
    }
    Ok(ordered)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskConsensus {
    /// `None` when no labeler supplied a mask for the class.
    pub mask: Option<MaskAnnotation>,
    pub agreement: f64,
}

/// Strict-majority pixel vote. A set with no mask for `class` votes background
/// everywhere.
pub fn merge_mask_consensus(sets: &[AnnotationSet], class: DefectClass) -> Result<MaskConsensus, LabelingError> {
    let sets = check_sets(sets)?;
    let masks: Vec<Option<BinaryMask>> = sets
        .iter()
        .map(|s| s.mask_for(class).map(|m| m.to_mask()).transpose())
        .collect::<Result<_, _>>()?;
    let Some(shape) = masks.iter().flatten().next() else {
        return Ok(MaskConsensus {
            mask: None,
            agreement: 1.0,
        });
    };
    let (w, h) = (shape.width(), shape.height());
    if masks.iter().flatten().any(|m| m.width() != w || m.height() != h) {
        return Err(LabelingError::DimensionMismatch(class));
    }
    let n = sets.len();
    let mut votes = vec![0usize; (w * h) as usize];
    for m in masks.iter().flatten() {
        for (v, &b) in votes.iter_mut().zip(m.bits()) {
            *v += b as usize;
        }
    }
    let merged: Vec<bool> = votes.iter().map(|&v| 2 * v > n).collect();
    let agreement = if votes.is_empty() {
        1.0
    } else {
        votes.iter().map(|&v| v.max(n - v) as f64 / n as f64).sum::<f64>() / votes.len() as f64
    };
    Ok(MaskConsensus {
        mask: Some(MaskAnnotation::from_mask(class, &BinaryMask::from_bits(w, h, merged))),
        agreement,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxConsensus {
    pub boxes: Vec<BoxAnnotation>,
    /// Mean fraction of labelers supporting each cluster; 1.0 when nobody drew a box.
    pub agreement: f64,
}

fn lower_median(mut v: Vec<u32>) -> u32 {
    v.sort_unstable();
    v[(v.len() - 1) / 2]
}

/// Greedy IoU clustering across labelers followed by a coordinate-wise median.
/// Output never holds more boxes than the largest single-labeler count.
pub fn merge_box_consensus(
    sets: &[AnnotationSet],
    class: DefectClass,
    iou_threshold: f64,
    quorum: f64,
) -> Result<BoxConsensus, LabelingError> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) || !(quorum > 0.0 && quorum <= 1.0) {
        return Err(LabelingError::InvalidParameter(format!(
            "iou_threshold {iou_threshold} and quorum {quorum} must lie in (0, 1]"
        )));
    }
    let sets = check_sets(sets)?;
    let n = sets.len();
    let per_labeler: Vec<Vec<Rect>> = sets
        .iter()
        .map(|s| {
            let mut r: Vec<Rect> = s.boxes_for(class).map(|b| b.rect()).collect();
            r.sort();
            r
        })
        .collect();
    let max_per_labeler = per_labeler.iter().map(Vec::len).max().unwrap_or(0);
    let mut used: Vec<Vec<bool>> = per_labeler.iter().map(|r| vec![false; r.len()]).collect();
    let mut clusters: Vec<Vec<Rect>> = Vec::new();
    for li in 0..n {
        for bi in 0..per_labeler[li].len() {
            if used[li][bi] {
                continue;
            }
            used[li][bi] = true;
            let seed = per_labeler[li][bi];
            let mut members = vec![seed];
            for lj in (0..n).filter(|&lj| lj != li) {
                let best = per_labeler[lj]
                    .iter()
                    .enumerate()
                    .filter(|(bj, _)| !used[lj][*bj])
                    .map(|(bj, r)| (bj, seed.iou(r)))
                    .filter(|&(_, iou)| iou >= iou_threshold)
                    .fold(None, |acc: Option<(usize, f64)>, cur| match acc {
                        Some(a) if a.1 >= cur.1 => Some(a),
                        _ => Some(cur),
                    });
                if let Some((bj, _)) = best {
                    used[lj][bj] = true;
                    members.push(per_labeler[lj][bj]);
                }
            }
            clusters.push(members);
        }
    }
    let agreement = if clusters.is_empty() {
        1.0
    } else {
        clusters.iter().map(|c| c.len() as f64 / n as f64).sum::<f64>() / clusters.len() as f64
    };
    let needed = quorum * n as f64;
    let mut emitted: Vec<(usize, Rect)> = clusters
        .iter()
        .filter(|c| c.len() as f64 >= needed - 1e-12)
        .map(|c| {
            let rect = Rect::new(
                lower_median(c.iter().map(|r| r.x).collect()),
                lower_median(c.iter().map(|r| r.y).collect()),
                lower_median(c.iter().map(|r| r.w).collect()),
                lower_median(c.iter().map(|r| r.h).collect()),
            );
            (c.len(), rect)
        })
        .collect();
    // keep the best-supported clusters when there are too many
    emitted.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    emitted.truncate(max_per_labeler);
    let mut boxes: Vec<BoxAnnotation> = emitted.into_iter().map(|(_, r)| BoxAnnotation::new(class, r)).collect();
    boxes.sort_by_key(|b| b.rect());
    Ok(BoxConsensus { boxes, agreement })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusResult {
    pub image_id: String,
    pub merged: AnnotationSet,
    pub agreement: BTreeMap<DefectClass, f64>,
    pub contributing_labelers: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsensusConfig {
    pub iou_threshold: f64,
    pub quorum: f64,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        ConsensusConfig {
            iou_threshold: 0.5,
            quorum: 0.5,
        }
    }
}

/// Merges every class into one Draft set with `Consensus` provenance.
pub fn merge_consensus(sets: &[AnnotationSet], config: &ConsensusConfig) -> Result<ConsensusResult, LabelingError> {
    let ordered = check_sets(sets)?;
    let image_id = ordered[0].image_id.clone();
    let mut merged = AnnotationSet::blank(image_id.clone(), Source::Consensus);
    let mut agreement = BTreeMap::new();
    for class in DefectClass::ALL {
        match class.task() {
            Task::Segmentation => {
                let mc = merge_mask_consensus(sets, class)?;
                if let Some(m) = mc.mask {
                    merged.set_mask(m);
                }
                agreement.insert(class, mc.agreement);
            }
            Task::Detection => {
                let bc = merge_box_consensus(sets, class, config.iou_threshold, config.quorum)?;
                merged.boxes.extend(bc.boxes);
                agreement.insert(class, bc.agreement);
            }
        }
    }
    Ok(ConsensusResult {
        image_id,
        merged,
        agreement,
        contributing_labelers: ordered.iter().map(|s| s.source.key()).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReviewDecision {
    CrowdApprove,
    ExpertApprove,
    ReturnForRelabel,
}

impl ReviewDecision {
    pub const ALL: [ReviewDecision; 3] = [
        ReviewDecision::CrowdApprove,
        ReviewDecision::ExpertApprove,
        ReviewDecision::ReturnForRelabel,
    ];
}

pub fn next_review_state(from: ReviewState, decision: ReviewDecision) -> Option<ReviewState> {
    use ReviewDecision::*;
    use ReviewState::*;
    match (from, decision) {
        (Draft, CrowdApprove) | (ReturnedForRelabel, CrowdApprove) => Some(CrowdReviewed),
        (CrowdReviewed, ExpertApprove) => Some(ExpertApproved),
        (CrowdReviewed, ReturnForRelabel) => Some(ReturnedForRelabel),
        _ => None,
    }
}

pub fn apply_review(mut set: AnnotationSet, decision: ReviewDecision) -> Result<AnnotationSet, LabelingError> {
    let to = next_review_state(set.review_state, decision).ok_or(LabelingError::IllegalTransition {
        from: set.review_state,
        decision,
    })?;
    set.review_state = to;
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreAnnotatedBatch {
    pub batch: LabelingBatch,
    /// `None` marks an image that starts blank.
    pub drafts: BTreeMap<String, Option<AnnotationSet>>,
}

pub fn attach_preannotations(batch: LabelingBatch, predictions: BTreeMap<String, AnnotationSet>) -> PreAnnotatedBatch {
    let mut drafts: BTreeMap<String, Option<AnnotationSet>> = batch.image_ids.iter().map(|id| (id.clone(), None)).collect();
    for (id, pred) in predictions {
        match drafts.get_mut(&id) {
            Some(slot) => {
                let mut draft = pred;
                draft.review_state = ReviewState::Draft;
                draft.seeded_from = Some(draft.source.clone());
                draft.elapsed_labeling_seconds = None;
                *slot = Some(draft);
            }
            None => log::warn!("ignoring prediction for {id}: not in batch {}", batch.batch_id),
        }
    }
    PreAnnotatedBatch { batch, drafts }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrectionCost {
    pub image_id: String,
    pub pixels_flipped: u64,
    pub boxes_added: u32,
    pub boxes_removed: u32,
    pub boxes_moved: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seconds: Option<f64>,
}

impl CorrectionCost {
    /// Flipped pixels plus box edits.
    pub fn edit_units(&self) -> u64 {
        self.pixels_flipped + (self.boxes_added + self.boxes_removed + self.boxes_moved) as u64
    }
}

pub fn correction_cost(pre: &AnnotationSet, fin: &AnnotationSet) -> Result<CorrectionCost, LabelingError> {
    if pre.image_id != fin.image_id {
        return Err(LabelingError::MixedImages);
    }
    let mut cost = CorrectionCost {
        image_id: fin.image_id.clone(),
        seconds: fin.elapsed_labeling_seconds,
        ..Default::default()
    };
    for class in DefectClass::segmentation_classes() {
        let (a, b) = (pre.mask_for(class), fin.mask_for(class));
        let (a, b) = match (a, b) {
            (None, None) => continue,
            (Some(m), None) | (None, Some(m)) => {
                cost.pixels_flipped += m.foreground_count();
                continue;
            }
            (Some(a), Some(b)) => (a.to_mask()?, b.to_mask()?),
        };
        if !a.same_shape(&b) {
            return Err(LabelingError::DimensionMismatch(class));
        }
        cost.pixels_flipped += a.bits().iter().zip(b.bits()).filter(|(x, y)| x != y).count() as u64;
    }
    for class in DefectClass::detection_classes() {
        let pres: Vec<Rect> = pre.boxes_for(class).map(|b| b.rect()).collect();
        let fins: Vec<Rect> = fin.boxes_for(class).map(|b| b.rect()).collect();
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (i, p) in pres.iter().enumerate() {
            for (j, f) in fins.iter().enumerate() {
                let iou = p.iou(f);
                if iou >= 0.5 {
                    pairs.push((iou, i, j));
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut pre_used = vec![false; pres.len()];
        let mut fin_used = vec![false; fins.len()];
        for (_, i, j) in pairs {
            if pre_used[i] || fin_used[j] {
                continue;
            }
            pre_used[i] = true;
            fin_used[j] = true;
            if pres[i] != fins[j] {
                cost.boxes_moved += 1;
            }
        }
        cost.boxes_removed += pre_used.iter().filter(|u| !**u).count() as u32;
        cost.boxes_added += fin_used.iter().filter(|u| !**u).count() as u32;
    }
    Ok(cost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn human(id: &str) -> Source {
        Source::HumanLabeler(id.into())
    }

    fn mask_set(labeler: &str, bits: Vec<bool>, w: u32, h: u32) -> AnnotationSet {
        let mut s = AnnotationSet::blank("img", human(labeler));
        s.set_mask(MaskAnnotation::from_mask(DefectClass::PolycrystallineDefect, &BinaryMask::from_bits(w, h, bits)));
        s
    }

    fn box_set(labeler: &str, rects: &[Rect]) -> AnnotationSet {
        let mut s = AnnotationSet::blank("img", human(labeler));
        s.boxes = rects.iter().map(|&r| BoxAnnotation::new(DefectClass::CenterDefect, r)).collect();
        s
    }

    #[test]
    fn batches_take_pool_order() {
        let mut pool: VecDeque<String> = (0..250).map(|i| format!("i{i:03}")).collect();
        let sizes: Vec<usize> = (0..3).map(|k| create_batch(format!("b{k}"), &mut pool, 100).unwrap().image_ids.len()).collect();
        assert_eq!(sizes, vec![100, 100, 50]);
        assert!(matches!(create_batch("b3", &mut pool, 100), Err(LabelingError::EmptyPool)));
        let mut one: VecDeque<String> = VecDeque::from(vec!["x".to_string()]);
        let b = create_batch("b", &mut one, 100).unwrap();
        assert_eq!(b.image_ids, vec!["x"]);
        assert_eq!(b.status, BatchStatus::Open);
    }

    #[test]
    fn batch_status_transitions() {
        let mut pool: VecDeque<String> = VecDeque::from(vec!["x".to_string()]);
        let mut b = create_batch("b", &mut pool, 1).unwrap();
        assert!(b.transition(BatchStatus::Finalized).is_err());
        b.transition(BatchStatus::AwaitingConsensus).unwrap();
        b.transition(BatchStatus::AwaitingExpert).unwrap();
        b.transition(BatchStatus::Open).unwrap();
        assert!(b.transition(BatchStatus::AwaitingExpert).is_err());
    }

    #[test]
    fn mask_vote_examples() {
        let a = mask_set("a", vec![true, true, false, false], 2, 2);
        let b = mask_set("b", vec![true, false, false, false], 2, 2);
        let c = mask_set("c", vec![true, true, true, false], 2, 2);
        let mc = merge_mask_consensus(&[a.clone(), b.clone(), c], DefectClass::PolycrystallineDefect).unwrap();
        let m = mc.mask.unwrap().to_mask().unwrap();
        // 3 of 3, 2 of 3, 1 of 3, 0 of 3
        assert_eq!(m.bits(), &[true, true, false, false]);
        assert!((mc.agreement - (1.0 + 2.0 / 3.0 + 2.0 / 3.0 + 1.0) / 4.0).abs() < 1e-12);

        let tie = merge_mask_consensus(&[a, b], DefectClass::PolycrystallineDefect).unwrap();
        assert_eq!(tie.mask.unwrap().to_mask().unwrap().bits(), &[true, false, false, false]);
        assert!((tie.agreement - (1.0 + 0.5 + 1.0 + 1.0) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn mask_consensus_errors_and_absent_class() {
        let a = mask_set("a", vec![true; 4], 2, 2);
        let mut other = mask_set("b", vec![true; 4], 2, 2);
        other.image_id = "other".into();
        assert!(matches!(
            merge_mask_consensus(&[a.clone(), other], DefectClass::PolycrystallineDefect),
            Err(LabelingError::MixedImages)
        ));
        let wide = mask_set("c", vec![true; 6], 3, 2);
        assert!(matches!(
            merge_mask_consensus(&[a.clone(), wide], DefectClass::PolycrystallineDefect),
            Err(LabelingError::DimensionMismatch(_))
        ));
        let none = merge_mask_consensus(&[box_set("a", &[])], DefectClass::PolycrystallineDefect).unwrap();
        assert_eq!(none.mask, None);
        assert_eq!(none.agreement, 1.0);
        assert!(matches!(
            merge_mask_consensus(&[a.clone(), a], DefectClass::PolycrystallineDefect),
            Err(LabelingError::DuplicateLabeler(_))
        ));
    }

    #[test]
    fn box_consensus_examples() {
        let r = Rect::new(3, 4, 10, 10);
        let same: Vec<_> = ["a", "b", "c"].iter().map(|l| box_set(l, &[r])).collect();
        let out = merge_box_consensus(&same, DefectClass::CenterDefect, 0.5, 0.5).unwrap();
        assert_eq!(out.boxes, vec![BoxAnnotation::new(DefectClass::CenterDefect, r)]);
        assert_eq!(out.agreement, 1.0);

        let disjoint = vec![
            box_set("a", &[Rect::new(0, 0, 5, 5)]),
            box_set("b", &[Rect::new(10, 0, 5, 5)]),
            box_set("c", &[Rect::new(20, 0, 5, 5)]),
        ];
        let out = merge_box_consensus(&disjoint, DefectClass::CenterDefect, 0.5, 0.5).unwrap();
        assert!(out.boxes.is_empty());
        assert!((out.agreement - 1.0 / 3.0).abs() < 1e-12);

        let jitter = vec![
            box_set("a", &[Rect::new(0, 0, 10, 10)]),
            box_set("b", &[Rect::new(1, 0, 10, 10)]),
            box_set("c", &[Rect::new(0, 1, 10, 10)]),
        ];
        let out = merge_box_consensus(&jitter, DefectClass::CenterDefect, 0.5, 0.5).unwrap();
        assert_eq!(out.boxes.len(), 1);
        assert_eq!(out.boxes[0].rect(), Rect::new(0, 0, 10, 10));
        assert_eq!(out.boxes[0].score, None);
    }

    #[test]
    fn box_consensus_bad_parameters() {
        let s = vec![box_set("a", &[])];
        assert!(merge_box_consensus(&s, DefectClass::CenterDefect, 0.0, 0.5).is_err());
        assert!(merge_box_consensus(&s, DefectClass::CenterDefect, 0.5, 1.5).is_err());
    }

    #[test]
    fn review_table_is_total() {
        use ReviewState::*;
        let states = [Draft, CrowdReviewed, ExpertApproved, ReturnedForRelabel];
        let mut legal = 0;
        for s in states {
            for d in ReviewDecision::ALL {
                let mut set = AnnotationSet::blank("img", Source::Consensus);
                set.review_state = s;
                match apply_review(set, d) {
                    Ok(next) => {
                        legal += 1;
                        assert!(states.contains(&next.review_state));
                    }
                    Err(LabelingError::IllegalTransition { from, decision }) => {
                        assert_eq!((from, decision), (s, d));
                    }
                    Err(e) => panic!("unexpected {e}"),
                }
            }
        }
        assert_eq!(legal, 4);
        // nothing leaves ExpertApproved
        assert!(ReviewDecision::ALL.iter().all(|&d| next_review_state(ExpertApproved, d).is_none()));
        let set = AnnotationSet::blank("img", Source::Consensus);
        assert!(apply_review(set.clone(), ReviewDecision::ExpertApprove).is_err());
        let set = apply_review(set, ReviewDecision::CrowdApprove).unwrap();
        assert_eq!(set.review_state, CrowdReviewed);
        assert_eq!(apply_review(set, ReviewDecision::ExpertApprove).unwrap().review_state, ExpertApproved);
    }

    #[test]
    fn preannotation_seeding() {
        let mut pool: VecDeque<String> = VecDeque::from(vec!["img".to_string(), "blank".to_string()]);
        let batch = create_batch("b", &mut pool, 2).unwrap();
        let empty = attach_preannotations(batch.clone(), BTreeMap::new());
        assert!(empty.drafts.values().all(Option::is_none));

        let mut pred = AnnotationSet::blank("img", Source::Model("m-v1".into()));
        pred.set_mask(MaskAnnotation::from_mask(
            DefectClass::PolycrystallineDefect,
            &BinaryMask::from_fn(4, 4, |c, r| c == r),
        ));
        let stray = AnnotationSet::blank("elsewhere", Source::Model("m-v1".into()));
        let seeded = attach_preannotations(
            batch,
            [("img".to_string(), pred.clone()), ("elsewhere".to_string(), stray)].into_iter().collect(),
        );
        assert_eq!(seeded.drafts.len(), 2);
        let draft = seeded.drafts["img"].as_ref().unwrap();
        assert_eq!(draft.masks, pred.masks);
        assert_eq!(draft.seeded_from, Some(Source::Model("m-v1".into())));
        assert_eq!(draft.review_state, ReviewState::Draft);
        assert!(seeded.drafts["blank"].is_none());
    }

    #[test]
    fn correction_cost_examples() {
        let a = mask_set("a", vec![true, false, true, false], 2, 2);
        assert_eq!(correction_cost(&a, &a).unwrap().edit_units(), 0);
        let blank = AnnotationSet::blank("img", human("a"));
        assert_eq!(correction_cost(&blank, &a).unwrap().pixels_flipped, 2);

        let pre = box_set("a", &[Rect::new(0, 0, 10, 10)]);
        let fin = box_set("a", &[Rect::new(2, 0, 10, 10)]);
        let c = correction_cost(&pre, &fin).unwrap();
        assert_eq!((c.boxes_moved, c.boxes_added, c.boxes_removed), (1, 0, 0));
        let far = box_set("a", &[Rect::new(50, 50, 10, 10)]);
        let c = correction_cost(&pre, &far).unwrap();
        assert_eq!((c.boxes_moved, c.boxes_added, c.boxes_removed), (0, 1, 1));
        let mut other = blank.clone();
        other.image_id = "x".into();
        assert!(matches!(correction_cost(&blank, &other), Err(LabelingError::MixedImages)));
    }

    proptest! {
        #[test]
        fn pixel_cost_symmetric(a in proptest::collection::vec(any::<bool>(), 25), b in proptest::collection::vec(any::<bool>(), 25)) {
            let sa = mask_set("a", a, 5, 5);
            let sb = mask_set("b", b, 5, 5);
            prop_assert_eq!(correction_cost(&sa, &sb).unwrap().pixels_flipped, correction_cost(&sb, &sa).unwrap().pixels_flipped);
            prop_assert_eq!(correction_cost(&sa, &sa).unwrap().edit_units(), 0);
        }

        #[test]
        fn box_output_bounded(raw in proptest::collection::vec(proptest::collection::vec((0u32..20, 0u32..20, 1u32..8, 1u32..8), 0..5), 1..5), quorum in 0.1f64..=1.0) {
            let sets: Vec<AnnotationSet> = raw
                .iter()
                .enumerate()
                .map(|(i, rs)| box_set(&format!("l{i}"), &rs.iter().map(|&(x, y, w, h)| Rect::new(x, y, w, h)).collect::<Vec<_>>()))
                .collect();
            let out = merge_box_consensus(&sets, DefectClass::CenterDefect, 0.5, quorum).unwrap();
            let max = raw.iter().map(Vec::len).max().unwrap();
            prop_assert!(out.boxes.len() <= max);
            prop_assert!((0.0..=1.0).contains(&out.agreement));
            // permutation invariance
            let mut rev = sets.clone();
            rev.reverse();
            prop_assert_eq!(merge_box_consensus(&rev, DefectClass::CenterDefect, 0.5, quorum).unwrap(), out);
        }

        #[test]
        fn box_unanimity(rs in proptest::collection::vec((0u32..20, 0u32..20, 1u32..8, 1u32..8), 0..5), n in 1usize..5) {
            let mut rects: Vec<Rect> = rs.iter().map(|&(x, y, w, h)| Rect::new(x, y, w, h)).collect();
            rects.sort();
            let sets: Vec<AnnotationSet> = (0..n).map(|i| box_set(&format!("l{i}"), &rects)).collect();
            let out = merge_box_consensus(&sets, DefectClass::CenterDefect, 0.5, 1.0).unwrap();
            prop_assert_eq!(out.boxes.iter().map(|b| b.rect()).collect::<Vec<_>>(), rects);
        }
    }
}
