use std::collections::BTreeSet;

use defectloop_core::ingest::split_dataset;
use defectloop_core::orchestrator::{Phase, Pipeline, PipelineConfig, Registry, RELABEL_QUEUE_FILE};
use defectloop_core::synthetic::{CrowdLabels, SimulatedCrowd, SyntheticConfig, SyntheticCorpus, SyntheticImages};

const RES: u32 = 128;

/// A large first batch puts the seeded mislabeled scenes into the approved
/// set; the augmentation loop should single them out.
#[test]
fn sal_flags_seeded_mislabels() {
    let corpus = SyntheticCorpus::generate(&SyntheticConfig {
        images: 60,
        seed: 4,
        ..SyntheticConfig::default()
    });
    let ids = corpus.ids();
    let bad: BTreeSet<String> = ids.iter().filter(|id| corpus.scene(id).unwrap().mislabeled).cloned().collect();
    let (pool, test_ids) = split_dataset(&ids, 0.8, 2).unwrap();
    let test = corpus.labeled("test", &test_ids, RES).unwrap();
    let backend = defectloop_core::backend::ReferenceClassical::new("sal");
    let images = SyntheticImages {
        corpus: &corpus,
        resolution: RES,
    };
    let mut labels = CrowdLabels {
        corpus: &corpus,
        crowd: SimulatedCrowd::new(RES, 3),
    };
    let dir = tempfile::tempdir().unwrap();
    let config = PipelineConfig {
        batch_size: pool.len(),
        resolution: RES,
        seed: 9,
        ..PipelineConfig::default()
    };
    let mut p = Pipeline::new(config, &backend, &images, &mut labels, pool.clone(), test)
        .unwrap()
        .with_registry(Registry::open(dir.path()).unwrap());
    p.run_baseline_phase().unwrap();
    assert_eq!(p.state().phase, Phase::MALAssisted);
    let in_pool: BTreeSet<String> = pool.iter().filter(|id| bad.contains(*id)).cloned().collect();
    assert!(!in_pool.is_empty(), "corpus seeded no mislabels into the pool");

    let reports = p.run_sal_loop().unwrap();
    assert!(!reports.is_empty() && reports.len() <= 5);
    let flagged: BTreeSet<String> = reports.last().unwrap().image_ids.iter().cloned().collect();
    assert_eq!(flagged, in_pool, "flagged {flagged:?}, seeded {in_pool:?}");
    for pair in reports.windows(2) {
        let prev: BTreeSet<&String> = pair[0].image_ids.iter().collect();
        assert!(pair[1].image_ids.iter().all(|id| prev.contains(id)));
    }
    let queue = std::fs::read_to_string(dir.path().join(RELABEL_QUEUE_FILE)).unwrap();
    assert_eq!(queue.lines().count(), flagged.len());

    // the remaining pool is empty, so the final phase closes the run
    p.run_final_phase().unwrap();
    assert_eq!(p.state().phase, Phase::Done);
}
