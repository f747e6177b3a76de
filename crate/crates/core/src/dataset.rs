//! Versioned dataset manifest: images, preprocessing provenance, split
//! assignment and augmentation lineage.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::Rect;
use crate::augment::TransformSpec;
use crate::store::{self, StoreError};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("augmented entry {0} is assigned to the test split")]
    AugmentedInTest(String),
    #[error("original entry {0} has no split assignment")]
    Unassigned(String),
    #[error("split assigns unknown image {0}")]
    UnknownSplitEntry(String),
    #[error("augmented entry {child} has parent {parent} which is not a training original")]
    BadParent { child: String, parent: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Lineage {
    Original,
    Augmented {
        parent_image_id: String,
        transform: Vec<TransformSpec>,
    },
}

impl Lineage {
    pub fn is_original(&self) -> bool {
        matches!(self, Lineage::Original)
    }

    pub fn parent(&self) -> Option<&str> {
        match self {
            Lineage::Original => None,
            Lineage::Augmented { parent_image_id, .. } => Some(parent_image_id),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub resolution: u32,
    pub crop_region: Rect,
    pub lineage: Lineage,
}

impl ManifestEntry {
    pub fn original(image_id: impl Into<String>, resolution: u32, crop_region: Rect) -> Self {
        ManifestEntry {
            image_id: image_id.into(),
            resolution,
            crop_region,
            lineage: Lineage::Original,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub entries: Vec<ManifestEntry>,
    pub split: BTreeMap<String, Split>,
    pub split_seed: u64,
}

impl DatasetManifest {
    pub fn new(dataset_id: impl Into<String>, split_seed: u64) -> Self {
        DatasetManifest {
            dataset_id: dataset_id.into(),
            entries: Vec::new(),
            split: BTreeMap::new(),
            split_seed,
        }
    }

    /// Checks that the split partitions the originals and that augmented
    /// samples only descend from training originals.
    pub fn validate(&self) -> Result<(), ManifestError> {
        let mut train_originals = BTreeSet::new();
        let mut known = BTreeSet::new();
        for e in &self.entries {
            known.insert(e.image_id.as_str());
            if e.lineage.is_original() {
                match self.split.get(&e.image_id) {
                    None => return Err(ManifestError::Unassigned(e.image_id.clone())),
                    Some(Split::Train) => {
                        train_originals.insert(e.image_id.as_str());
                    }
                    Some(Split::Test) => {}
                }
            }
        }
        for e in &self.entries {
            if let Lineage::Augmented { parent_image_id, .. } = &e.lineage {
                if self.split.get(&e.image_id) == Some(&Split::Test) {
                    return Err(ManifestError::AugmentedInTest(e.image_id.clone()));
                }
                if !train_originals.contains(parent_image_id.as_str()) {
                    return Err(ManifestError::BadParent {
                        child: e.image_id.clone(),
                        parent: parent_image_id.clone(),
                    });
                }
            }
        }
        if let Some(id) = self.split.keys().find(|id| !known.contains(id.as_str())) {
            return Err(ManifestError::UnknownSplitEntry(id.clone()));
        }
        Ok(())
    }

    pub fn resolutions(&self) -> BTreeSet<u32> {
        self.entries.iter().map(|e| e.resolution).collect()
    }

    pub fn split_of(&self, image_id: &str) -> Option<Split> {
        self.split.get(image_id).copied()
    }

    pub fn entries_at(&self, resolution: u32) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.resolution == resolution)
    }

    /// Training entries (originals and augmentations) at one resolution.
    pub fn train_entries(&self, resolution: u32) -> Vec<&ManifestEntry> {
        self.entries_at(resolution)
            .filter(|e| self.split_of(&e.image_id) != Some(Split::Test))
            .collect()
    }

    pub fn train_originals(&self, resolution: u32) -> Vec<&ManifestEntry> {
        self.train_entries(resolution)
            .into_iter()
            .filter(|e| e.lineage.is_original())
            .collect()
    }

    pub fn test_entries(&self, resolution: u32) -> Vec<&ManifestEntry> {
        self.entries_at(resolution)
            .filter(|e| self.split_of(&e.image_id) == Some(Split::Test))
            .collect()
    }

    /// Distinct original image ids in entry order.
    pub fn original_ids(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.entries
            .iter()
            .filter(|e| e.lineage.is_original() && seen.insert(e.image_id.clone()))
            .map(|e| e.image_id.clone())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        self.validate()?;
        store::write_json_atomic(path, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let m: DatasetManifest = store::read_json(path)?;
        m.validate()?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> DatasetManifest {
        let mut m = DatasetManifest::new("ds", 3);
        for id in ["a", "b", "c"] {
            m.entries.push(ManifestEntry::original(id, 256, Rect::new(0, 0, 8, 8)));
        }
        m.split.insert("a".into(), Split::Train);
        m.split.insert("b".into(), Split::Train);
        m.split.insert("c".into(), Split::Test);
        m
    }

    #[test]
    fn validation_rules() {
        let mut m = manifest();
        m.validate().unwrap();
        m.entries.push(ManifestEntry {
            image_id: "a~aug1".into(),
            resolution: 256,
            crop_region: Rect::new(0, 0, 8, 8),
            lineage: Lineage::Augmented {
                parent_image_id: "a".into(),
                transform: vec![],
            },
        });
        m.validate().unwrap();
        assert_eq!(m.train_entries(256).len(), 3);
        assert_eq!(m.train_originals(256).len(), 2);

        let mut bad = m.clone();
        bad.split.insert("a~aug1".into(), Split::Test);
        assert!(matches!(bad.validate(), Err(ManifestError::AugmentedInTest(_))));

        let mut bad = m.clone();
        if let Lineage::Augmented { parent_image_id, .. } = &mut bad.entries[3].lineage {
            *parent_image_id = "c".into();
        }
        assert!(matches!(bad.validate(), Err(ManifestError::BadParent { .. })));

        let mut bad = m;
        bad.split.remove("b");
        assert!(matches!(bad.validate(), Err(ManifestError::Unassigned(_))));
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let m = manifest();
        m.save(&path).unwrap();
        assert_eq!(DatasetManifest::load(&path).unwrap(), m);
    }
}
