use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use proptest::prelude::*;

use super::*;
use crate::annotation::{DefectClass, Source};
use crate::backend::{BackendKind, Prediction};
use crate::dataset::{DatasetManifest, Split};
use crate::metrics::{Evaluation, MetricsReport};

const RES: u32 = 16;

type PerImage = Box<dyn Fn(u64, &str) -> f64 + Send + Sync>;

/// Test accuracy indexed by model version (0 is a supplied pre-trained model);
/// the last entry repeats.
struct Scripted {
    accuracies: Vec<f64>,
    per_image: PerImage,
    version: Mutex<u64>,
    trained_states: Mutex<Vec<ReviewState>>,
}

impl Scripted {
    fn new(accuracies: &[f64]) -> Self {
        Scripted {
            accuracies: accuracies.to_vec(),
            per_image: Box::new(|_, _| 1.0),
            version: Mutex::new(0),
            trained_states: Mutex::new(Vec::new()),
        }
    }

    fn with_per_image(mut self, f: impl Fn(u64, &str) -> f64 + Send + Sync + 'static) -> Self {
        self.per_image = Box::new(f);
        self
    }

    fn handle(version: u64) -> ModelHandle {
        ModelHandle {
            model_id: format!("scripted-v{version}"),
            backend_kind: BackendKind::ReferenceClassical,
            version,
            training_manifest_id: "scripted".into(),
            resolution: RES,
        }
    }

    fn accuracy(&self, version: u64) -> f64 {
        let i = (version as usize).min(self.accuracies.len() - 1);
        self.accuracies[i]
    }
}

impl ModelBackend for Scripted {
    fn kind(&self) -> BackendKind {
        BackendKind::ReferenceClassical
    }

    fn train(&self, data: &dyn LabeledData, _: &TrainingHyperparams) -> Result<ModelHandle, BackendError> {
        for i in 0..data.len() {
            self.trained_states.lock().unwrap().push(data.sample(i)?.1.review_state);
        }
        let mut v = self.version.lock().unwrap();
        *v += 1;
        Ok(Scripted::handle(*v))
    }

    fn predict(&self, _: &ModelHandle, image_id: &str, _: &Plane) -> Result<Prediction, BackendError> {
        Ok(Prediction::empty(image_id))
    }

    fn evaluate(&self, model: &ModelHandle, data: &dyn LabeledData, _: &EvalConfig) -> Result<Evaluation, BackendError> {
        let acc = self.accuracy(model.version);
        let values: BTreeMap<DefectClass, f64> = DefectClass::ALL.iter().map(|&c| (c, acc)).collect();
        let per_image = (0..data.len())
            .map(|i| {
                let id = data.image_id(i);
                let a = (self.per_image)(model.version, &id);
                (id, a)
            })
            .collect();
        Ok(Evaluation {
            report: MetricsReport::from_class_values(data.dataset_id(), RES, data.len(), &values, acc)?,
            per_image,
        })
    }

    fn export_params(&self, model: &ModelHandle) -> Result<Vec<u8>, BackendError> {
        Ok(model.model_id.as_bytes().to_vec())
    }

    fn import_params(&self, _: &ModelHandle, _: &[u8]) -> Result<(), BackendError> {
        Ok(())
    }
}

struct Flat;

impl ImageSource for Flat {
    fn image(&self, _: &str) -> Result<Plane, OrchestratorError> {
        Ok(Plane::new(RES, RES, 0.3))
    }
}

fn approved(id: &str) -> AnnotationSet {
    let mut s = AnnotationSet::blank(id, Source::Consensus);
    s.review_state = ReviewState::ExpertApproved;
    s
}

fn approve_all(batch: &PreAnnotatedBatch) -> Result<Vec<AnnotationSet>, OrchestratorError> {
    Ok(batch.batch.image_ids.iter().map(|id| approved(id)).collect())
}

fn pool(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("p-{i:02}")).collect()
}

fn test_split() -> InMemoryData {
    let samples = (0..2).map(|i| (Plane::new(RES, RES, 0.3), approved(&format!("t-{i}")))).collect();
    InMemoryData::new("test", RES, samples)
}

fn config(batch_size: usize, max_batches: u32) -> PipelineConfig {
    PipelineConfig {
        batch_size,
        max_batches,
        resolution: RES,
        sal_rate: 2,
        ..PipelineConfig::default()
    }
}

#[test]
fn baseline_stops_at_threshold() {
    let be = Scripted::new(&[0.0, 0.5, 0.7, 0.85]);
    let mut labels = approve_all;
    let mut p = Pipeline::new(config(2, 50), &be, &Flat, &mut labels, pool(20), test_split()).unwrap();
    let m = p.run_baseline_phase().unwrap();
    assert_eq!(m.version, 3);
    assert_eq!(p.log().len(), 3);
    let accs: Vec<f64> = p.log().iter().map(|l| l.accuracy).collect();
    for (a, e) in accs.iter().zip([0.5, 0.7, 0.85]) {
        assert!((a - e).abs() < 1e-12);
    }
    assert_eq!(p.state().phase, Phase::MALAssisted);
    assert_eq!(p.pool().len(), 14);
    // every training input was expert approved
    assert!(be.trained_states.lock().unwrap().iter().all(|s| *s == ReviewState::ExpertApproved));
}

#[test]
fn pretrained_model_skips_baseline() {
    let be = Scripted::new(&[0.9]);
    let mut labels = approve_all;
    let mut p = Pipeline::new(config(2, 50), &be, &Flat, &mut labels, pool(4), test_split())
        .unwrap()
        .with_model(Scripted::handle(0))
        .unwrap();
    p.run_baseline_phase().unwrap();
    assert!(p.log().is_empty());
    assert_eq!(p.state().phase, Phase::MALAssisted);
}

#[test]
fn baseline_cap_is_reported_and_persisted() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Registry::open(dir.path()).unwrap();
    let be = Scripted::new(&[0.4]);
    let mut labels = approve_all;
    let mut p = Pipeline::new(config(1, 5), &be, &Flat, &mut labels, pool(20), test_split())
        .unwrap()
        .with_registry(reg.clone());
    let err = p.run_baseline_phase().unwrap_err();
    assert!(matches!(err, OrchestratorError::MaxBatchesExceeded { batches: 5, .. }));
    assert_eq!(p.log().len(), 5);
    let stored = reg.load_state().unwrap();
    assert!(stored.incomplete);
    assert_eq!(stored.batches_processed, 5);
    assert_eq!(reg.list_models().unwrap().len(), 5);
    let m = reg.load_model(&be, "scripted-v5").unwrap();
    assert_eq!(m.version, 5);
}

#[test]
fn baseline_pool_exhaustion() {
    let be = Scripted::new(&[0.4]);
    let mut labels = approve_all;
    let mut p = Pipeline::new(config(3, 50), &be, &Flat, &mut labels, pool(5), test_split()).unwrap();
    assert!(matches!(p.run_baseline_phase(), Err(OrchestratorError::PoolExhausted)));
    assert_eq!(p.log().len(), 2);
}

fn after_baseline<'a>(be: &'a Scripted, labels: &'a mut dyn LabelSource, n: usize, cap: u32) -> Pipeline<'a> {
    let mut p = Pipeline::new(config(1, cap), be, &Flat, labels, pool(n), test_split())
        .unwrap()
        .with_model(Scripted::handle(0))
        .unwrap();
    p.run_baseline_phase().unwrap();
    p
}

#[test]
fn final_phase_reaches_threshold() {
    let be = Scripted::new(&[0.85, 0.9, 0.96]);
    let mut labels = approve_all;
    let mut p = after_baseline(&be, &mut labels, 10, 50);
    let m = p.run_final_phase().unwrap();
    assert_eq!(m.version, 2);
    assert_eq!(p.log().len(), 2);
    assert_eq!(p.state().phase, Phase::Done);
    assert!(!p.state().incomplete);
    // MAL: every batch carried a model draft
    assert!(p.log().iter().all(|l| l.preannotated_by.is_some() && l.mean_correction_cost.is_some()));
}

#[test]
fn final_phase_plateau_hits_cap() {
    let be = Scripted::new(&[0.85, 0.94]);
    let mut labels = approve_all;
    let mut p = after_baseline(&be, &mut labels, 10, 4);
    let err = p.run_final_phase().unwrap_err();
    assert!(matches!(err, OrchestratorError::MaxBatchesExceeded { batches: 4, .. }));
    assert_eq!(p.log().len(), 4);
    assert_eq!(p.state().phase, Phase::Done);
    assert!(p.state().incomplete);
}

#[test]
fn final_phase_empty_pool_above_threshold() {
    let be = Scripted::new(&[0.97]);
    let mut labels = approve_all;
    let mut p = after_baseline(&be, &mut labels, 0, 4);
    p.run_final_phase().unwrap();
    assert!(p.log().is_empty());
    assert_eq!(p.state().phase, Phase::Done);
    assert!(!p.state().incomplete);
}

#[test]
fn final_phase_pool_runs_out_below_threshold() {
    let be = Scripted::new(&[0.85, 0.9]);
    let mut labels = approve_all;
    let mut p = after_baseline(&be, &mut labels, 3, 50);
    p.run_final_phase().unwrap();
    assert_eq!(p.log().len(), 3);
    assert_eq!(p.state().phase, Phase::Done);
    assert!(p.state().incomplete);
}

#[test]
fn final_phase_requires_baseline() {
    let be = Scripted::new(&[0.9]);
    let mut labels = approve_all;
    let mut p = Pipeline::new(config(1, 4), &be, &Flat, &mut labels, pool(3), test_split()).unwrap();
    assert!(matches!(p.run_final_phase(), Err(OrchestratorError::IllegalPhase { .. })));
}

#[test]
fn unapproved_labels_are_rejected() {
    let be = Scripted::new(&[0.9]);
    let mut labels = |b: &PreAnnotatedBatch| -> Result<Vec<AnnotationSet>, OrchestratorError> {
        Ok(b.batch.image_ids.iter().map(|id| AnnotationSet::blank(id.clone(), Source::Consensus)).collect())
    };
    let mut p = Pipeline::new(config(2, 4), &be, &Flat, &mut labels, pool(3), test_split()).unwrap();
    assert!(matches!(p.run_baseline_phase(), Err(OrchestratorError::NotApproved(_))));
    assert!(be.trained_states.lock().unwrap().is_empty());
}

#[test]
fn abort_marks_incomplete() {
    let be = Scripted::new(&[0.4]);
    let control = Arc::new(PipelineControl::default());
    let c2 = control.clone();
    let mut labels = move |b: &PreAnnotatedBatch| {
        c2.request_abort();
        approve_all(b)
    };
    let mut p = Pipeline::new(config(1, 50), &be, &Flat, &mut labels, pool(5), test_split())
        .unwrap()
        .with_control(control);
    assert!(matches!(p.run_baseline_phase(), Err(OrchestratorError::Aborted)));
    assert_eq!(p.log().len(), 1);
    assert!(p.state().incomplete);
}

#[test]
fn overlapping_pool_and_test_split_rejected() {
    let be = Scripted::new(&[0.9]);
    let mut labels = approve_all;
    let r = Pipeline::new(config(1, 4), &be, &Flat, &mut labels, vec!["t-0".into()], test_split());
    assert!(matches!(r, Err(OrchestratorError::InvalidConfig(_))));
}

fn sal_pipeline<'a>(be: &'a Scripted, labels: &'a mut dyn LabelSource) -> Pipeline<'a> {
    let mut p = Pipeline::new(config(10, 50), be, &Flat, labels, pool(10), test_split()).unwrap();
    p.process_batch().unwrap();
    p
}

#[test]
fn sal_skips_when_everything_is_fine() {
    let be = Scripted::new(&[0.9]);
    let mut labels = approve_all;
    let mut p = sal_pipeline(&be, &mut labels);
    assert!(p.run_sal_loop().unwrap().is_empty());
    assert_eq!(p.state().sal_iterations_done, 0);
}

fn start_acc(id: &str) -> f64 {
    match id.strip_prefix("p-") {
        Some(i) => 0.05 * i.parse::<f64>().unwrap(),
        None => 1.0,
    }
}

#[test]
fn sal_improving_schedule_shrinks_reports() {
    // image i starts at 0.05 i and gains 0.1 per retrain
    let be = Scripted::new(&[0.9]).with_per_image(|v, id| (start_acc(id) + 0.1 * v as f64).min(1.0));
    let mut labels = approve_all;
    let mut p = sal_pipeline(&be, &mut labels);
    let reports = p.run_sal_loop().unwrap();
    assert!(!reports.is_empty() && reports.len() <= 5);
    let first: BTreeSet<&String> = reports[0].image_ids.iter().collect();
    for w in reports.windows(2) {
        let a: BTreeSet<&String> = w[0].image_ids.iter().collect();
        assert!(w[1].image_ids.iter().all(|id| a.contains(id)));
    }
    assert!(reports.last().unwrap().image_ids.iter().all(|id| first.contains(id)));
    for r in &reports {
        assert!(r.per_image_accuracy.values().all(|&a| a < 0.5));
        assert_eq!(r.per_image_accuracy.len(), r.image_ids.len());
    }
}

#[test]
fn sal_fixed_point_runs_five_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Registry::open(dir.path()).unwrap();
    let be = Scripted::new(&[0.9]).with_per_image(|_, id| start_acc(id));
    let mut labels = approve_all;
    let mut p = sal_pipeline(&be, &mut labels).with_registry(reg.clone());
    let reports = p.run_sal_loop().unwrap();
    assert_eq!(reports.len(), 5);
    let expected: Vec<String> = (0..10).map(|i| format!("p-{i:02}")).collect();
    for r in &reports {
        assert_eq!(r.image_ids, expected);
    }
    assert_eq!(reg.load_relabel(5).unwrap().image_ids, expected);
    let queue = std::fs::read_to_string(dir.path().join(RELABEL_QUEUE_FILE)).unwrap();
    assert_eq!(queue.lines().count(), 10);
    // ten low images, one extra copy each at rate 2
    assert_eq!(be.trained_states.lock().unwrap().len(), 10 + 5 * 20);
}

#[test]
fn phase_advance_is_one_step_forward() {
    let mut s = PipelineState::new(&PipelineConfig::default());
    assert!(s.advance(Phase::Final).is_err());
    s.advance(Phase::MALAssisted).unwrap();
    assert!(s.advance(Phase::BaselineTraining).is_err());
    s.advance(Phase::Final).unwrap();
    s.advance(Phase::Done).unwrap();
    assert!(s.advance(Phase::Done).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn phases_never_regress(trace in prop::collection::vec(0.0f64..1.0, 1..10), cap in 1u32..5, n in 0usize..8) {
        let mut accs = vec![0.0];
        accs.extend(trace);
        let be = Scripted::new(&accs);
        let seen = Arc::new(Mutex::new(Vec::new()));
        let s2 = seen.clone();
        let mut labels = approve_all;
        let mut p = Pipeline::new(config(1, cap), &be, &Flat, &mut labels, pool(n), test_split())
            .unwrap()
            .with_observer(move |st| s2.lock().unwrap().push(st.phase));
        let _ = p.run_full();
        let phases = seen.lock().unwrap().clone();
        prop_assert!(phases.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(p.state().batches_processed as usize <= n);
    }
}

struct Blank;

impl SampleSource for Blank {
    fn sample(&self, image_id: &str, resolution: u32) -> Result<(Plane, AnnotationSet), BackendError> {
        let mut s = approved(image_id);
        s.image_id = image_id.to_string();
        Ok((Plane::new(resolution, resolution, 0.3), s))
    }
}

fn base_manifest(n: usize) -> DatasetManifest {
    let mut m = DatasetManifest::new("base", 1);
    for res in [16u32, 32] {
        for i in 0..n {
            m.entries.push(ManifestEntry::original(format!("b-{i:02}"), res, Rect::new(0, 0, res, res)));
        }
    }
    for i in 0..n {
        let split = if i % 5 == 0 { Split::Test } else { Split::Train };
        m.split.insert(format!("b-{i:02}"), split);
    }
    m
}

#[test]
fn grid_shape_and_determinism() {
    let base = base_manifest(10);
    let factory = |_: &str| -> Box<dyn ModelBackend> { Box::new(Scripted::new(&[0.0, 0.75])) };
    let cfg = GridConfig {
        resolutions: vec![16, 32],
        ..GridConfig::default()
    };
    let grid = run_experiment_grid(&base, &Blank, &factory, &cfg).unwrap();
    assert_eq!(grid.cells.len(), 6);
    let csv = grid.csv();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.starts_with(crate::metrics::REPORT_CSV_HEADER));
    let sizes: Vec<usize> = grid.cells.iter().map(|c| c.report.dataset_size).collect();
    assert_eq!(sizes, vec![20, 50, 100, 20, 50, 100]);
    for c in &grid.cells {
        // 8 training originals times the rate; the 2 test images stay unexpanded
        assert_eq!(c.train_size, 8 * c.rate as usize);
        assert_eq!(c.test_size, 2);
    }
    let again = run_experiment_grid(&base, &Blank, &factory, &cfg).unwrap();
    assert_eq!(again.csv(), csv);
}

#[test]
fn grid_single_cell() {
    let base = base_manifest(10);
    let factory = |_: &str| -> Box<dyn ModelBackend> { Box::new(Scripted::new(&[0.0, 0.75])) };
    let cfg = GridConfig {
        resolutions: vec![16],
        rates: vec![1],
        ..GridConfig::default()
    };
    let grid = run_experiment_grid(&base, &Blank, &factory, &cfg).unwrap();
    assert_eq!(grid.cells.len(), 1);
    assert_eq!(grid.cells[0].report.dataset_size, 10);
    assert_eq!(grid.cells[0].train_size, 8);
}
