//! Task distribution for human labelers: open batches, exclusive per-image
//! leases, submissions, automatic consensus and expert review.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use defectloop_core::labeling::{
    apply_review, correction_cost, merge_consensus, BatchStatus, ConsensusConfig, ConsensusResult, CorrectionCost,
    LabelingBatch, ReviewDecision,
};
use defectloop_core::store::{write_json_atomic, StoreError};
use defectloop_core::{AnnotationSet, DefectClass, ReviewState, Source};

pub const DEFAULT_LEASE: Duration = Duration::from_secs(30 * 60);

#[derive(Debug, Error)]
pub enum BoardError {
    #[error("unknown labeler {0}")]
    UnknownLabeler(String),
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("unknown batch {0}")]
    UnknownBatch(String),
    #[error("lease on task {0} has expired")]
    LeaseExpired(String),
    #[error("validation failed: {0}")]
    ValidationFailed(String),
    #[error("{0}")]
    Conflict(String),
    #[error("task {0} has no submission yet")]
    NotSubmitted(String),
    #[error("labeling aborted")]
    Aborted,
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// What a labeler receives when polling for work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEnvelope {
    pub task_id: String,
    pub image_id: String,
    pub image_uri: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_annotation: Option<AnnotationSet>,
    pub class_catalog: Vec<DefectClass>,
    pub batch_id: String,
    /// Unix seconds.
    pub lease_expires_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitAck {
    pub task_id: String,
    pub image_id: String,
    pub batch_id: String,
    /// Edits relative to the model draft, when the task carried one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correction_cost: Option<CorrectionCost>,
    pub image_complete: bool,
    pub batch_status: BatchStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageView {
    pub image_id: String,
    pub submissions: usize,
    pub required: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consensus: Option<ConsensusResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchView {
    pub batch_id: String,
    pub status: BatchStatus,
    pub assigned_labelers: BTreeSet<String>,
    pub images: Vec<ImageView>,
}

struct Slot {
    image_id: String,
    width: u32,
    height: u32,
    draft: Option<AnnotationSet>,
    /// labeler -> task id
    submissions: BTreeMap<String, String>,
    lease: Option<String>,
    consensus: Option<ConsensusResult>,
}

struct BatchRecord {
    batch: LabelingBatch,
    per_image: usize,
    slots: Vec<Slot>,
}

struct Task {
    batch_id: String,
    slot: usize,
    labeler: String,
    expires: Instant,
    /// Stored submission, serialized once so reads return identical bytes.
    stored: Option<String>,
}

#[derive(Default)]
struct Inner {
    labelers: BTreeSet<String>,
    batches: BTreeMap<String, BatchRecord>,
    order: Vec<String>,
    tasks: HashMap<String, Task>,
    next_task: u64,
}

pub struct TaskBoard {
    inner: Mutex<Inner>,
    changed: Condvar,
    lease: Duration,
    root: Option<PathBuf>,
    consensus: ConsensusConfig,
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Ids end up in file paths and URLs.
pub fn check_id(kind: &str, id: &str) -> Result<(), BoardError> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && id != "."
        && id != ".."
        && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.~".contains(c));
    if ok {
        Ok(())
    } else {
        Err(BoardError::ValidationFailed(format!("{kind} id {id:?} must be 1-128 chars of [A-Za-z0-9-_.~]")))
    }
}

impl BatchRecord {
    fn view(&self) -> BatchView {
        BatchView {
            batch_id: self.batch.batch_id.clone(),
            status: self.batch.status,
            assigned_labelers: self.batch.assigned_labelers.clone(),
            images: self
                .slots
                .iter()
                .map(|s| ImageView {
                    image_id: s.image_id.clone(),
                    submissions: s.submissions.len(),
                    required: self.per_image,
                    consensus: s.consensus.clone(),
                })
                .collect(),
        }
    }
}

impl TaskBoard {
    /// `root`, when given, receives every submission and consensus as JSON.
    pub fn new(root: Option<PathBuf>, lease: Duration) -> Self {
        TaskBoard {
            inner: Mutex::new(Inner::default()),
            changed: Condvar::new(),
            lease,
            root,
            consensus: ConsensusConfig::default(),
        }
    }

    pub fn register_labeler(&self, labeler_id: &str) -> Result<bool, BoardError> {
        check_id("labeler", labeler_id)?;
        let mut inner = self.inner.lock();
        let added = inner.labelers.insert(labeler_id.to_string());
        if added {
            if let Some(root) = &self.root {
                write_json_atomic(&root.join("labelers.json"), &inner.labelers)?;
            }
        }
        Ok(added)
    }

    /// Publishes a batch. `drafts` holds the model pre-annotation per image
    /// (or `None`), `dims` the image sizes used for validation.
    pub fn open_batch(
        &self,
        batch: LabelingBatch,
        mut drafts: BTreeMap<String, Option<AnnotationSet>>,
        dims: &BTreeMap<String, (u32, u32)>,
        per_image: usize,
    ) -> Result<BatchView, BoardError> {
        check_id("batch", &batch.batch_id)?;
        if per_image == 0 {
            return Err(BoardError::ValidationFailed("labelers_per_image must be positive".into()));
        }
        if batch.image_ids.is_empty() {
            return Err(BoardError::ValidationFailed("batch has no images".into()));
        }
        if batch.status != BatchStatus::Open {
            return Err(BoardError::ValidationFailed(format!("batch is {:?}, not Open", batch.status)));
        }
        let mut seen = BTreeSet::new();
        let mut slots = Vec::with_capacity(batch.image_ids.len());
        for id in &batch.image_ids {
            check_id("image", id)?;
            if !seen.insert(id) {
                return Err(BoardError::ValidationFailed(format!("image {id} listed twice")));
            }
            let &(width, height) = dims
                .get(id)
                .ok_or_else(|| BoardError::ValidationFailed(format!("no size for image {id}")))?;
            slots.push(Slot {
                image_id: id.clone(),
                width,
                height,
                draft: drafts.remove(id).flatten(),
                submissions: BTreeMap::new(),
                lease: None,
                consensus: None,
            });
        }
        let mut inner = self.inner.lock();
        if inner.batches.contains_key(&batch.batch_id) {
            return Err(BoardError::Conflict(format!("batch {} already exists", batch.batch_id)));
        }
        let id = batch.batch_id.clone();
        let record = BatchRecord { batch, per_image, slots };
        let view = record.view();
        inner.order.push(id.clone());
        inner.batches.insert(id, record);
        self.changed.notify_all();
        Ok(view)
    }

    fn expire_leases(inner: &mut Inner, now: Instant) {
        let Inner { batches, tasks, .. } = inner;
        for record in batches.values_mut() {
            for slot in &mut record.slots {
                if let Some(t) = &slot.lease {
                    if tasks.get(t).is_none_or(|t| t.expires <= now) {
                        slot.lease = None;
                    }
                }
            }
        }
    }

    /// Leases the first image of the oldest open batch that still needs a
    /// submission from `labeler_id` and is not leased to anyone else.
    pub fn next_task(&self, labeler_id: &str, now: Instant) -> Result<Option<TaskEnvelope>, BoardError> {
        let mut inner = self.inner.lock();
        if !inner.labelers.contains(labeler_id) {
            return Err(BoardError::UnknownLabeler(labeler_id.to_string()));
        }
        Self::expire_leases(&mut inner, now);
        let mut found = None;
        'outer: for batch_id in &inner.order {
            let record = &inner.batches[batch_id];
            if record.batch.status != BatchStatus::Open {
                continue;
            }
            for (i, slot) in record.slots.iter().enumerate() {
                if slot.lease.is_none() && slot.consensus.is_none() && !slot.submissions.contains_key(labeler_id) {
                    found = Some((batch_id.clone(), i));
                    break 'outer;
                }
            }
        }
        let Some((batch_id, i)) = found else {
            return Ok(None);
        };
        inner.next_task += 1;
        let task_id = format!("task-{:06}", inner.next_task);
        let expires_unix = unix_now() + self.lease.as_secs();
        inner.tasks.insert(
            task_id.clone(),
            Task {
                batch_id: batch_id.clone(),
                slot: i,
                labeler: labeler_id.to_string(),
                expires: now + self.lease,
                stored: None,
            },
        );
        let record = inner.batches.get_mut(&batch_id).expect("batch listed in order");
        record.batch.assigned_labelers.insert(labeler_id.to_string());
        let slot = &mut record.slots[i];
        slot.lease = Some(task_id.clone());
        Ok(Some(TaskEnvelope {
            task_id,
            image_id: slot.image_id.clone(),
            image_uri: format!("/images/{}.png", slot.image_id),
            pre_annotation: slot.draft.clone(),
            class_catalog: DefectClass::ALL.to_vec(),
            batch_id,
            lease_expires_at: expires_unix,
        }))
    }

    /// Stores a labeler's annotation for a leased task. The stored copy is
    /// stamped with the labeler's provenance, `Draft` review state and the
    /// reported labeling time.
    pub fn submit(
        &self,
        task_id: &str,
        mut annotation: AnnotationSet,
        elapsed_seconds: f64,
        now: Instant,
    ) -> Result<SubmitAck, BoardError> {
        if !(elapsed_seconds.is_finite() && elapsed_seconds >= 0.0) {
            return Err(BoardError::ValidationFailed("elapsed_seconds must be a non-negative number".into()));
        }
        let mut inner = self.inner.lock();
        let inner = &mut *inner;
        let task = inner.tasks.get(task_id).ok_or_else(|| BoardError::UnknownTask(task_id.to_string()))?;
        if task.stored.is_some() {
            return Err(BoardError::Conflict(format!("task {task_id} was already submitted")));
        }
        let (batch_id, slot_index, labeler) = (task.batch_id.clone(), task.slot, task.labeler.clone());
        let record = inner.batches.get_mut(&batch_id).expect("task batch exists");
        let slot = &mut record.slots[slot_index];
        if task.expires <= now || slot.lease.as_deref() != Some(task_id) {
            if slot.lease.as_deref() == Some(task_id) {
                slot.lease = None;
            }
            return Err(BoardError::LeaseExpired(task_id.to_string()));
        }
        if annotation.image_id != slot.image_id {
            return Err(BoardError::ValidationFailed(format!(
                "annotation is for image {}, task is for {}",
                annotation.image_id, slot.image_id
            )));
        }
        annotation
            .validate(slot.width, slot.height)
            .map_err(|e| BoardError::ValidationFailed(e.to_string()))?;
        annotation.source = Source::HumanLabeler(labeler.clone());
        annotation.review_state = ReviewState::Draft;
        annotation.elapsed_labeling_seconds = Some(elapsed_seconds);
        annotation.seeded_from = slot.draft.as_ref().map(|d| d.source.clone());
        let cost = match &slot.draft {
            Some(d) => Some(correction_cost(d, &annotation).map_err(|e| BoardError::ValidationFailed(e.to_string()))?),
            None => None,
        };
        let stored = serde_json::to_string(&annotation).map_err(|e| BoardError::ValidationFailed(e.to_string()))?;
        if let Some(root) = &self.root {
            let dir = root.join("annotations").join(&batch_id).join(&slot.image_id);
            write_json_atomic(&dir.join(format!("{labeler}.json")), &annotation)?;
        }
        slot.lease = None;
        slot.submissions.insert(labeler, task_id.to_string());
        let complete = slot.submissions.len() >= record.per_image;
        let image_id = slot.image_id.clone();
        if complete {
            let sets = slot
                .submissions
                .values()
                .map(|t| {
                    let json = if t == task_id { &stored } else { inner.tasks[t].stored.as_ref().expect("submitted") };
                    serde_json::from_str::<AnnotationSet>(json).expect("stored sets parse")
                })
                .collect::<Vec<_>>();
            let result = merge_consensus(&sets, &self.consensus).map_err(|e| BoardError::ValidationFailed(e.to_string()))?;
            if let Some(root) = &self.root {
                let dir = root.join("annotations").join(&batch_id).join(&slot.image_id);
                write_json_atomic(&dir.join("consensus.json"), &result)?;
            }
            slot.consensus = Some(result);
            if record.slots.iter().all(|s| s.consensus.is_some()) {
                record.batch.transition(BatchStatus::AwaitingConsensus).expect("open batch");
                record.batch.transition(BatchStatus::AwaitingExpert).expect("consensus done");
            }
        }
        let status = record.batch.status;
        inner.tasks.get_mut(task_id).expect("checked").stored = Some(stored);
        self.changed.notify_all();
        Ok(SubmitAck {
            task_id: task_id.to_string(),
            image_id,
            batch_id,
            correction_cost: cost,
            image_complete: complete,
            batch_status: status,
        })
    }

    /// Stored submission, byte for byte.
    pub fn annotation(&self, task_id: &str) -> Result<String, BoardError> {
        let inner = self.inner.lock();
        let task = inner.tasks.get(task_id).ok_or_else(|| BoardError::UnknownTask(task_id.to_string()))?;
        task.stored.clone().ok_or_else(|| BoardError::NotSubmitted(task_id.to_string()))
    }

    pub fn batch(&self, batch_id: &str) -> Result<BatchView, BoardError> {
        let inner = self.inner.lock();
        inner
            .batches
            .get(batch_id)
            .map(BatchRecord::view)
            .ok_or_else(|| BoardError::UnknownBatch(batch_id.to_string()))
    }

    /// Applies a review decision to the consensus of the listed images (all
    /// images when `image_ids` is empty). Returning an image discards its
    /// submissions and reopens the batch; approving every image finalizes it.
    pub fn review(&self, batch_id: &str, decision: ReviewDecision, image_ids: &[String]) -> Result<BatchView, BoardError> {
        let mut inner = self.inner.lock();
        let record = inner
            .batches
            .get_mut(batch_id)
            .ok_or_else(|| BoardError::UnknownBatch(batch_id.to_string()))?;
        if record.batch.status != BatchStatus::AwaitingExpert {
            return Err(BoardError::Conflict(format!(
                "batch {batch_id} is {:?}; reviews need AwaitingExpert",
                record.batch.status
            )));
        }
        let targets: Vec<usize> = if image_ids.is_empty() {
            (0..record.slots.len()).collect()
        } else {
            image_ids
                .iter()
                .map(|id| {
                    record
                        .slots
                        .iter()
                        .position(|s| &s.image_id == id)
                        .ok_or_else(|| BoardError::ValidationFailed(format!("image {id} is not in batch {batch_id}")))
                })
                .collect::<Result<_, _>>()?
        };
        // all-or-nothing: check every transition before applying any
        let mut updated = Vec::with_capacity(targets.len());
        for &i in &targets {
            let merged = record.slots[i].consensus.as_ref().expect("awaiting expert").merged.clone();
            let next = apply_review(merged, decision).map_err(|e| BoardError::Conflict(e.to_string()))?;
            updated.push((i, next));
        }
        let mut reopened = false;
        for (i, next) in updated {
            let slot = &mut record.slots[i];
            if next.review_state == ReviewState::ReturnedForRelabel {
                slot.consensus = None;
                slot.submissions.clear();
                reopened = true;
            } else {
                slot.consensus.as_mut().expect("awaiting expert").merged = next;
            }
        }
        if reopened {
            record.batch.transition(BatchStatus::Open).expect("expert may reopen");
        } else if record
            .slots
            .iter()
            .all(|s| s.consensus.as_ref().is_some_and(|c| c.merged.review_state == ReviewState::ExpertApproved))
        {
            record.batch.transition(BatchStatus::Finalized).expect("expert may finalize");
        }
        if let Some(root) = &self.root {
            for s in record.slots.iter().filter(|s| s.consensus.is_some()) {
                let dir = root.join("annotations").join(batch_id).join(&s.image_id);
                write_json_atomic(&dir.join("consensus.json"), s.consensus.as_ref().expect("filtered"))?;
            }
        }
        let view = record.view();
        self.changed.notify_all();
        Ok(view)
    }

    /// Blocks until the batch is finalized and returns the approved sets in
    /// batch order. `abort` is polled while waiting.
    pub fn wait_finalized(&self, batch_id: &str, abort: &dyn Fn() -> bool) -> Result<Vec<AnnotationSet>, BoardError> {
        let mut inner = self.inner.lock();
        loop {
            let record = inner
                .batches
                .get(batch_id)
                .ok_or_else(|| BoardError::UnknownBatch(batch_id.to_string()))?;
            if record.batch.status == BatchStatus::Finalized {
                return Ok(record
                    .slots
                    .iter()
                    .map(|s| s.consensus.as_ref().expect("finalized").merged.clone())
                    .collect());
            }
            if abort() {
                return Err(BoardError::Aborted);
            }
            self.changed.wait_for(&mut inner, Duration::from_millis(100));
        }
    }

    /// Closes a batch that will never be finished, e.g. after an abort.
    pub fn withdraw(&self, batch_id: &str) {
        let mut inner = self.inner.lock();
        if inner.batches.remove(batch_id).is_some() {
            inner.order.retain(|b| b != batch_id);
            inner.tasks.retain(|_, t| t.batch_id != batch_id);
        }
    }
}
