//! The training loop: baseline phase, selective augmentation (SAL) retraining,
//! model-assisted final phase, and the resolution/dataset-size experiment grid.

mod grid;
mod registry;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{AnnotationSet, Rect, ReviewState};
use crate::augment::{apply_transform, derive_seed, expand_dataset, select_for_augmentation, AugmentError, AugmentationPlan};
use crate::backend::{BackendError, InMemoryData, LabeledData, ModelBackend, ModelHandle, TrainingHyperparams};
use crate::dataset::{Lineage, ManifestEntry};
use crate::labeling::{attach_preannotations, correction_cost, create_batch, CorrectionCost, LabelingError, PreAnnotatedBatch};
use crate::metrics::{EvalConfig, MetricsError};
use crate::raster::Plane;
use crate::selection::{histogram_features, score_uncertainty, select_batch, SelectionError};
use crate::store::StoreError;

pub use grid::{run_experiment_grid, ExperimentGrid, GridCell, GridConfig, ManifestData, SampleSource};
pub use registry::{Registry, GRID_REPORT_FILE, RELABEL_QUEUE_FILE, STATE_FILE};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("{phase:?} hit the cap of {batches} batches")]
    MaxBatchesExceeded { phase: Phase, batches: u32 },
    #[error("unlabeled pool is exhausted")]
    PoolExhausted,
    #[error("no trained model")]
    NoModel,
    #[error("illegal phase change {from:?} -> {to:?}")]
    IllegalPhase { from: Phase, to: Phase },
    #[error("annotation for {0} is not an expert-approved set from the current batch")]
    NotApproved(String),
    #[error("run aborted")]
    Aborted,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("image source: {0}")]
    Image(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Labeling(#[from] LabelingError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    BaselineTraining,
    MALAssisted,
    Final,
    Done,
}

impl Phase {
    pub fn next(self) -> Option<Phase> {
        match self {
            Phase::BaselineTraining => Some(Phase::MALAssisted),
            Phase::MALAssisted => Some(Phase::Final),
            Phase::Final => Some(Phase::Done),
            Phase::Done => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub baseline_threshold: f64,
    pub final_threshold: f64,
    /// Per-image mean accuracy below which an image is augmented during SAL.
    pub sal_threshold: f64,
    pub sal_max_iterations: u32,
    /// Copies per low-accuracy image (the original included).
    pub sal_rate: u32,
    pub batch_size: usize,
    /// Cap on batches per phase.
    pub max_batches: u32,
    pub resolution: u32,
    pub seed: u64,
    pub hyperparams: TrainingHyperparams,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            baseline_threshold: 0.80,
            final_threshold: 0.95,
            sal_threshold: 0.5,
            sal_max_iterations: 5,
            sal_rate: 5,
            batch_size: crate::labeling::DEFAULT_BATCH_SIZE,
            max_batches: 50,
            resolution: 256,
            seed: 0,
            hyperparams: TrainingHyperparams::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(OrchestratorError::InvalidConfig(format!("{name} {v} outside [0, 1]")))
            }
        };
        unit("baseline_threshold", self.baseline_threshold)?;
        unit("final_threshold", self.final_threshold)?;
        unit("sal_threshold", self.sal_threshold)?;
        if self.batch_size == 0 || self.max_batches == 0 || self.sal_rate == 0 || self.resolution == 0 {
            return Err(OrchestratorError::InvalidConfig(
                "batch_size, max_batches, sal_rate and resolution must be positive".into(),
            ));
        }
        self.hyperparams.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub phase: Phase,
    pub current_accuracy: f64,
    pub baseline_threshold: f64,
    pub final_threshold: f64,
    pub sal_iterations_done: u32,
    pub batches_processed: u32,
    /// Batches run in the current phase group; compared against `max_batches`.
    pub phase_batches: u32,
    pub max_batches: u32,
    pub incomplete: bool,
    pub model_id: Option<String>,
}

impl PipelineState {
    pub fn new(config: &PipelineConfig) -> Self {
        PipelineState {
            phase: Phase::BaselineTraining,
            current_accuracy: 0.0,
            baseline_threshold: config.baseline_threshold,
            final_threshold: config.final_threshold,
            sal_iterations_done: 0,
            batches_processed: 0,
            phase_batches: 0,
            max_batches: config.max_batches,
            incomplete: false,
            model_id: None,
        }
    }

    /// Moves exactly one step forward.
    pub fn advance(&mut self, to: Phase) -> Result<(), OrchestratorError> {
        if self.phase.next() != Some(to) {
            return Err(OrchestratorError::IllegalPhase { from: self.phase, to });
        }
        self.phase = to;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchLog {
    pub batch_id: String,
    pub phase: Phase,
    pub image_ids: Vec<String>,
    /// Model the batch was pre-annotated with, if any.
    pub preannotated_by: Option<String>,
    /// Model after retraining on the batch.
    pub model_id: Option<String>,
    pub accuracy: f64,
    /// Mean edit units per pre-annotated image.
    pub mean_correction_cost: Option<f64>,
    pub costs: Vec<CorrectionCost>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelabelReport {
    pub iteration: u32,
    /// Worst first.
    pub image_ids: Vec<String>,
    pub per_image_accuracy: BTreeMap<String, f64>,
    /// Seconds since the Unix epoch.
    pub generated_at: u64,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub model: ModelHandle,
    pub reports: Vec<RelabelReport>,
    pub log: Vec<BatchLog>,
    pub state: PipelineState,
}

/// Unlabeled images by id, at the pipeline resolution.
pub trait ImageSource: Sync {
    fn image(&self, image_id: &str) -> Result<Plane, OrchestratorError>;
}

/// The human side of the loop: turns a (possibly pre-annotated) batch into
/// expert-approved annotation sets, one per image.
pub trait LabelSource {
    fn label(&mut self, batch: &PreAnnotatedBatch) -> Result<Vec<AnnotationSet>, OrchestratorError>;
}

impl<F> LabelSource for F
where
    F: FnMut(&PreAnnotatedBatch) -> Result<Vec<AnnotationSet>, OrchestratorError>,
{
    fn label(&mut self, batch: &PreAnnotatedBatch) -> Result<Vec<AnnotationSet>, OrchestratorError> {
        self(batch)
    }
}

/// Out-of-band requests checked between batches.
#[derive(Debug, Default)]
pub struct PipelineControl {
    abort: AtomicBool,
    advance: AtomicBool,
}

impl PipelineControl {
    pub fn request_abort(&self) {
        self.abort.store(true, Ordering::SeqCst);
    }

    /// Ends the current phase early at the next check.
    pub fn request_advance(&self) {
        self.advance.store(true, Ordering::SeqCst);
    }

    pub fn abort_requested(&self) -> bool {
        self.abort.load(Ordering::SeqCst)
    }

    fn take_advance(&self) -> bool {
        self.advance.swap(false, Ordering::SeqCst)
    }
}

fn now_secs() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

type Observer<'a> = Box<dyn Fn(&PipelineState) + Send + 'a>;

pub struct Pipeline<'a> {
    config: PipelineConfig,
    state: PipelineState,
    backend: &'a dyn ModelBackend,
    images: &'a dyn ImageSource,
    labels: &'a mut dyn LabelSource,
    pool: Vec<String>,
    test: InMemoryData,
    planes: BTreeMap<String, Plane>,
    features: BTreeMap<String, Vec<f64>>,
    approved: BTreeMap<String, AnnotationSet>,
    augmented: BTreeMap<String, (Plane, AnnotationSet)>,
    model: Option<ModelHandle>,
    log: Vec<BatchLog>,
    reports: Vec<RelabelReport>,
    registry: Option<Registry>,
    control: Option<Arc<PipelineControl>>,
    observer: Option<Observer<'a>>,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        config: PipelineConfig,
        backend: &'a dyn ModelBackend,
        images: &'a dyn ImageSource,
        labels: &'a mut dyn LabelSource,
        pool: Vec<String>,
        test: InMemoryData,
    ) -> Result<Self, OrchestratorError> {
        config.validate()?;
        if test.is_empty() {
            return Err(OrchestratorError::InvalidConfig("test split is empty".into()));
        }
        if test.resolution != config.resolution {
            return Err(OrchestratorError::InvalidConfig(format!(
                "test split is at {}, pipeline at {}",
                test.resolution, config.resolution
            )));
        }
        let test_ids: BTreeSet<String> = (0..test.len()).map(|i| test.image_id(i)).collect();
        if let Some(id) = pool.iter().find(|id| test_ids.contains(*id)) {
            return Err(OrchestratorError::InvalidConfig(format!("{id} is in both the pool and the test split")));
        }
        let mut seen = BTreeSet::new();
        let pool: Vec<String> = pool.into_iter().filter(|id| seen.insert(id.clone())).collect();
        Ok(Pipeline {
            state: PipelineState::new(&config),
            config,
            backend,
            images,
            labels,
            pool,
            test,
            planes: BTreeMap::new(),
            features: BTreeMap::new(),
            approved: BTreeMap::new(),
            augmented: BTreeMap::new(),
            model: None,
            log: Vec::new(),
            reports: Vec::new(),
            registry: None,
            control: None,
            observer: None,
        })
    }

    pub fn with_registry(mut self, registry: Registry) -> Self {
        self.registry = Some(registry);
        self
    }

    pub fn with_control(mut self, control: Arc<PipelineControl>) -> Self {
        self.control = Some(control);
        self
    }

    /// Called with a snapshot after every state change.
    pub fn with_observer(mut self, observer: impl Fn(&PipelineState) + Send + 'a) -> Self {
        self.observer = Some(Box::new(observer));
        self
    }

    /// Starts from an already trained model; its test accuracy becomes the
    /// current accuracy.
    pub fn with_model(mut self, model: ModelHandle) -> Result<Self, OrchestratorError> {
        self.state.current_accuracy = self.backend.evaluate(&model, &self.test, &self.config.eval)?.report.mean_accuracy;
        self.state.model_id = Some(model.model_id.clone());
        self.model = Some(model);
        Ok(self)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn state(&self) -> &PipelineState {
        &self.state
    }

    pub fn model(&self) -> Option<&ModelHandle> {
        self.model.as_ref()
    }

    pub fn log(&self) -> &[BatchLog] {
        &self.log
    }

    pub fn reports(&self) -> &[RelabelReport] {
        &self.reports
    }

    pub fn pool(&self) -> &[String] {
        &self.pool
    }

    pub fn approved(&self) -> &BTreeMap<String, AnnotationSet> {
        &self.approved
    }

    fn checkpoint(&mut self) -> Result<(), OrchestratorError> {
        self.state.model_id = self.model.as_ref().map(|m| m.model_id.clone());
        if let Some(r) = &self.registry {
            r.save_state(&self.state)?;
            r.save_log(&self.log)?;
        }
        if let Some(f) = &self.observer {
            f(&self.state);
        }
        Ok(())
    }

    fn advance(&mut self, to: Phase) -> Result<(), OrchestratorError> {
        self.state.advance(to)?;
        log::info!("pipeline phase -> {to:?} (accuracy {:.4})", self.state.current_accuracy);
        self.checkpoint()
    }

    fn check_abort(&mut self) -> Result<(), OrchestratorError> {
        if self.control.as_ref().is_some_and(|c| c.abort_requested()) {
            self.state.incomplete = true;
            self.checkpoint()?;
            return Err(OrchestratorError::Aborted);
        }
        Ok(())
    }

    fn advance_requested(&self) -> bool {
        self.control.as_ref().is_some_and(|c| c.take_advance())
    }

    fn load_planes(&mut self, ids: &[String]) -> Result<(), OrchestratorError> {
        for id in ids {
            if !self.planes.contains_key(id) {
                let plane = self.images.image(id)?;
                if plane.width() != self.config.resolution || plane.height() != self.config.resolution {
                    return Err(OrchestratorError::Image(format!(
                        "{id} is {}x{}, pipeline runs at {}",
                        plane.width(),
                        plane.height(),
                        self.config.resolution
                    )));
                }
                self.features.insert(id.clone(), histogram_features(&plane));
                self.planes.insert(id.clone(), plane);
            }
        }
        Ok(())
    }

    /// Picks the next batch: most uncertain under the current model, ties
    /// spread over image appearance.
    fn choose(&mut self) -> Result<(Vec<String>, BTreeMap<String, AnnotationSet>), OrchestratorError> {
        let pool = self.pool.clone();
        self.load_planes(&pool)?;
        let (scores, drafts) = match &self.model {
            None => (pool.iter().map(|id| (id.clone(), 0.5)).collect::<BTreeMap<_, _>>(), BTreeMap::new()),
            Some(model) => {
                let res = self.config.resolution;
                let thr = self.config.eval.probability_threshold;
                let (backend, planes) = (self.backend, &self.planes);
                let scored: Vec<(String, f64, AnnotationSet)> = pool
                    .par_iter()
                    .map(|id| {
                        let pred = backend.predict(model, id, &planes[id])?;
                        let score = score_uncertainty(&pred)?.score;
                        Ok((id.clone(), score, pred.to_annotation_set(&model.model_id, res, res, thr)))
                    })
                    .collect::<Result<_, OrchestratorError>>()?;
                let mut scores = BTreeMap::new();
                let mut drafts = BTreeMap::new();
                for (id, s, d) in scored {
                    scores.insert(id.clone(), s);
                    drafts.insert(id, d);
                }
                (scores, drafts)
            }
        };
        let chosen = select_batch(&pool, &scores, Some(&self.features), self.config.batch_size)?;
        let drafts = drafts.into_iter().filter(|(id, _)| chosen.contains(id)).collect();
        Ok((chosen, drafts))
    }

    fn training_data(&self) -> Result<InMemoryData, OrchestratorError> {
        let mut samples = Vec::with_capacity(self.approved.len() + self.augmented.len());
        for (id, set) in &self.approved {
            samples.push((self.planes[id].clone(), set.clone()));
        }
        samples.extend(self.augmented.values().cloned());
        if let Some((_, s)) = samples.iter().find(|(_, s)| s.review_state != ReviewState::ExpertApproved) {
            return Err(OrchestratorError::NotApproved(s.image_id.clone()));
        }
        let version = self.model.as_ref().map_or(0, |m| m.version);
        Ok(InMemoryData::new(
            format!("loop-{}-n{}-v{}", self.config.resolution, samples.len(), version + 1),
            self.config.resolution,
            samples,
        ))
    }

    fn originals_data(&self) -> InMemoryData {
        let samples = self
            .approved
            .iter()
            .map(|(id, set)| (self.planes[id].clone(), set.clone()))
            .collect();
        InMemoryData::new(format!("approved-{}", self.config.resolution), self.config.resolution, samples)
    }

    /// Retrains on everything approved so far; a training set that still
    /// misses a class keeps the previous model.
    fn retrain(&mut self) -> Result<(), OrchestratorError> {
        let data = self.training_data()?;
        match self.backend.train(&data, &self.config.hyperparams) {
            Ok(model) => {
                if let Some(r) = &self.registry {
                    r.save_model(self.backend, &model)?;
                }
                self.model = Some(model);
                Ok(())
            }
            Err(BackendError::ClassUnrepresented(class)) => {
                log::warn!("not retraining yet: no approved example of {class}");
                Ok(())
            }
            Err(e) => Err(e.into()),
        }
    }

    fn evaluate_test(&mut self) -> Result<(), OrchestratorError> {
        self.state.current_accuracy = match &self.model {
            Some(m) => self.backend.evaluate(m, &self.test, &self.config.eval)?.report.mean_accuracy,
            None => 0.0,
        };
        Ok(())
    }

    /// One select, pre-annotate, label, train, evaluate round.
    pub fn process_batch(&mut self) -> Result<BatchLog, OrchestratorError> {
        if self.pool.is_empty() {
            return Err(OrchestratorError::PoolExhausted);
        }
        let mal = self.state.phase >= Phase::MALAssisted;
        if mal && self.model.is_none() {
            return Err(OrchestratorError::NoModel);
        }
        let (ids, drafts) = self.choose()?;
        let batch_id = format!("batch-{:04}", self.state.batches_processed + 1);
        let mut queue: VecDeque<String> = ids.iter().cloned().collect();
        let batch = create_batch(batch_id.clone(), &mut queue, ids.len())?;
        let pre = attach_preannotations(batch, drafts);
        let labeled = match self.labels.label(&pre) {
            Ok(l) => l,
            Err(e) => {
                // a label source blocked on humans gives up when the run is aborted
                self.check_abort()?;
                return Err(e);
            }
        };

        let res = self.config.resolution;
        let wanted: BTreeSet<&String> = ids.iter().collect();
        let mut got = BTreeMap::new();
        for set in labeled {
            if set.review_state != ReviewState::ExpertApproved || !wanted.contains(&set.image_id) {
                return Err(OrchestratorError::NotApproved(set.image_id));
            }
            set.validate(res, res).map_err(LabelingError::from)?;
            got.insert(set.image_id.clone(), set);
        }
        if let Some(missing) = ids.iter().find(|id| !got.contains_key(*id)) {
            return Err(OrchestratorError::NotApproved(missing.clone()));
        }

        let mut costs = Vec::new();
        for (id, draft) in &pre.drafts {
            if let Some(d) = draft {
                costs.push(correction_cost(d, &got[id])?);
            }
        }
        let mean_cost =
            (!costs.is_empty()).then(|| costs.iter().map(|c| c.edit_units() as f64).sum::<f64>() / costs.len() as f64);

        self.pool.retain(|id| !wanted.contains(id));
        self.approved.extend(got);
        let preannotated_by = if mal || !costs.is_empty() {
            self.model.as_ref().map(|m| m.model_id.clone())
        } else {
            None
        };
        self.retrain()?;
        self.evaluate_test()?;
        self.state.batches_processed += 1;
        self.state.phase_batches += 1;
        let entry = BatchLog {
            batch_id,
            phase: self.state.phase,
            image_ids: ids,
            preannotated_by,
            model_id: self.model.as_ref().map(|m| m.model_id.clone()),
            accuracy: self.state.current_accuracy,
            mean_correction_cost: mean_cost,
            costs,
        };
        log::info!(
            "{} ({:?}): {} images, accuracy {:.4}",
            entry.batch_id,
            entry.phase,
            entry.image_ids.len(),
            entry.accuracy
        );
        self.log.push(entry.clone());
        self.checkpoint()?;
        Ok(entry)
    }

    /// Labels batches until the test accuracy reaches the baseline threshold,
    /// then switches to model-assisted labeling.
    pub fn run_baseline_phase(&mut self) -> Result<ModelHandle, OrchestratorError> {
        if self.state.phase != Phase::BaselineTraining {
            return Err(OrchestratorError::IllegalPhase {
                from: self.state.phase,
                to: Phase::MALAssisted,
            });
        }
        self.checkpoint()?;
        loop {
            self.check_abort()?;
            let forced = self.advance_requested();
            if self.model.is_some() && (forced || self.state.current_accuracy >= self.config.baseline_threshold) {
                self.state.phase_batches = 0;
                self.advance(Phase::MALAssisted)?;
                return self.model.clone().ok_or(OrchestratorError::NoModel);
            }
            if self.state.phase_batches >= self.config.max_batches {
                self.state.incomplete = true;
                self.checkpoint()?;
                return Err(OrchestratorError::MaxBatchesExceeded {
                    phase: Phase::BaselineTraining,
                    batches: self.state.phase_batches,
                });
            }
            if self.pool.is_empty() {
                self.state.incomplete = true;
                self.checkpoint()?;
                return Err(OrchestratorError::PoolExhausted);
            }
            self.process_batch()?;
        }
    }

    /// Selective augmentation: augment the approved images the current model
    /// does badly on, retrain, re-evaluate, and report the ones that stay bad.
    /// Each report is a subset of the previous one.
    pub fn run_sal_loop(&mut self) -> Result<Vec<RelabelReport>, OrchestratorError> {
        let mut model = self.model.clone().ok_or(OrchestratorError::NoModel)?;
        let originals = self.originals_data();
        let mut per_image = self.backend.evaluate(&model, &originals, &self.config.eval)?.per_image;
        let mut persistent: Option<BTreeSet<String>> = None;
        let mut reports = Vec::new();
        for iteration in 1..=self.config.sal_max_iterations {
            self.check_abort()?;
            if self.advance_requested() {
                break;
            }
            let low = select_for_augmentation(&per_image, self.config.sal_threshold);
            if low.is_empty() {
                break;
            }
            self.augmented = self.augment_low(&low, iteration)?;
            self.retrain()?;
            model = self.model.clone().ok_or(OrchestratorError::NoModel)?;
            per_image = self.backend.evaluate(&model, &originals, &self.config.eval)?.per_image;

            let still_low: BTreeSet<String> = select_for_augmentation(&per_image, self.config.sal_threshold)
                .into_iter()
                .collect();
            let keep: BTreeSet<String> = match &persistent {
                None => low.iter().filter(|id| still_low.contains(*id)).cloned().collect(),
                Some(prev) => prev.intersection(&still_low).cloned().collect(),
            };
            let mut ids: Vec<String> = keep.iter().cloned().collect();
            ids.sort_by(|a, b| per_image[a].total_cmp(&per_image[b]).then_with(|| a.cmp(b)));
            let report = RelabelReport {
                iteration,
                per_image_accuracy: ids.iter().map(|id| (id.clone(), per_image[id])).collect(),
                image_ids: ids,
                generated_at: now_secs(),
            };
            log::info!(
                "SAL iteration {iteration}: {} low, {} reported for relabeling",
                low.len(),
                report.image_ids.len()
            );
            if let Some(r) = &self.registry {
                r.save_relabel(&report)?;
            }
            persistent = Some(keep);
            reports.push(report);
            self.state.sal_iterations_done = iteration;
            self.evaluate_test()?;
            self.checkpoint()?;
        }
        self.reports.extend(reports.iter().cloned());
        Ok(reports)
    }

    fn augment_low(
        &self,
        low: &[String],
        iteration: u32,
    ) -> Result<BTreeMap<String, (Plane, AnnotationSet)>, OrchestratorError> {
        let res = self.config.resolution;
        let plan = AugmentationPlan::new(self.config.sal_rate, derive_seed(self.config.seed, "sal", iteration));
        let base: Vec<ManifestEntry> = low
            .iter()
            .map(|id| ManifestEntry::original(id.clone(), res, Rect::new(0, 0, res, res)))
            .collect();
        let children: Vec<ManifestEntry> = expand_dataset(&base, &plan)?
            .into_iter()
            .filter(|e| !e.lineage.is_original())
            .collect();
        let (planes, approved) = (&self.planes, &self.approved);
        children
            .par_iter()
            .map(|child| {
                let Lineage::Augmented {
                    parent_image_id,
                    transform,
                } = &child.lineage
                else {
                    unreachable!("originals were filtered out")
                };
                let out = apply_transform(&planes[parent_image_id], &approved[parent_image_id], transform)?;
                let id = format!("{}~sal{iteration}", child.image_id);
                let mut labels = out.labels;
                labels.image_id = id.clone();
                Ok((id, (out.image, labels)))
            })
            .collect()
    }

    /// Model-assisted labeling until the final threshold or the pool runs out.
    pub fn run_final_phase(&mut self) -> Result<ModelHandle, OrchestratorError> {
        if self.state.phase < Phase::MALAssisted {
            return Err(OrchestratorError::IllegalPhase {
                from: self.state.phase,
                to: Phase::Final,
            });
        }
        if self.model.is_none() {
            return Err(OrchestratorError::NoModel);
        }
        loop {
            self.check_abort()?;
            let forced = self.advance_requested();
            let reached = self.state.current_accuracy >= self.config.final_threshold;
            if self.state.phase == Phase::MALAssisted && (reached || forced || self.pool.is_empty()) {
                self.advance(Phase::Final)?;
            }
            if self.state.phase == Phase::Final {
                self.state.incomplete = !reached;
                self.advance(Phase::Done)?;
                return self.model.clone().ok_or(OrchestratorError::NoModel);
            }
            if self.state.phase == Phase::Done {
                return self.model.clone().ok_or(OrchestratorError::NoModel);
            }
            if self.state.phase_batches >= self.config.max_batches {
                self.state.incomplete = true;
                self.state.advance(Phase::Final)?;
                self.advance(Phase::Done)?;
                return Err(OrchestratorError::MaxBatchesExceeded {
                    phase: Phase::Final,
                    batches: self.state.phase_batches,
                });
            }
            self.process_batch()?;
        }
    }

    /// Baseline phase, SAL loop, then the final phase.
    pub fn run_full(&mut self) -> Result<RunSummary, OrchestratorError> {
        if self.state.phase == Phase::BaselineTraining {
            self.run_baseline_phase()?;
        }
        if self.state.phase == Phase::MALAssisted && self.state.sal_iterations_done == 0 {
            self.run_sal_loop()?;
        }
        let model = self.run_final_phase()?;
        Ok(RunSummary {
            model,
            reports: self.reports.clone(),
            log: self.log.clone(),
            state: self.state.clone(),
        })
    }
}

#[cfg(test)]
mod tests;
