use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::io::{load_volume, save_volume};
use super::{generate_phantom, PhantomSpec};
use crate::error::{Error, Result};
use crate::rng;
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self { train: 200, val: 50, test: 50 }
    }
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    fn split_of(&self, index: usize) -> Split {
        if index < self.train {
            Split::Train
        } else if index < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// One image/mask pair. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub case_id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
    /// For synthetic cases: the real case whose mask conditioned generation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_case: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub root_seed: u64,
    pub cases: Vec<CaseEntry>,
}

/// A case with its volumes in memory.
#[derive(Debug, Clone)]
pub struct LoadedCase {
    pub case_id: String,
    pub image: Volume,
    pub mask: Volume,
    pub source_case: Option<String>,
}

impl DatasetManifest {
    /// Errors if a case id repeats, within or across splits.
    pub fn validate_splits(&self) -> Result<()> {
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for c in &self.cases {
            if let Some(prev) = seen.insert(&c.case_id, c.split) {
                return Err(Error::SplitLeakage(format!(
                    "case {:?} appears in {:?} and {:?}",
                    c.case_id, prev, c.split
                )));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &CaseEntry> {
        self.cases.iter().filter(move |c| c.split == split)
    }

    pub fn ids(&self, split: Split) -> BTreeSet<&str> {
        self.split(split).map(|c| c.case_id.as_str()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })?;
        m.validate_splits()?;
        Ok(m)
    }

    /// Load the volumes of `split`, resolving paths against `root`.
    pub fn load_split(&self, root: &Path, split: Split) -> Result<Vec<LoadedCase>> {
        self.split(split).map(|c| load_case(root, c)).collect()
    }
}

pub fn load_case(root: &Path, c: &CaseEntry) -> Result<LoadedCase> {
    let image = load_volume(root.join(&c.image))?;
    let mask = load_volume(root.join(&c.mask))?;
    if !image.same_spatial(&mask) {
        return Err(Error::shape(
            "load_case",
            format!("{}: image {:?} vs mask {:?}", c.case_id, image.extents(), mask.extents()),
        ));
    }
    Ok(LoadedCase { case_id: c.case_id.clone(), image, mask, source_case: c.source_case.clone() })
}

/// Generate `counts.total()` phantoms under `out_dir` and write
/// `out_dir/manifest.json`. Case `i` uses a seed derived from
/// `(root_seed, i)`, so any single case can be regenerated alone.
pub fn build_dataset(
    spec: &PhantomSpec,
    counts: SplitCounts,
    root_seed: u64,
    out_dir: impl AsRef<Path>,
    config_hash: &str,
) -> Result<DatasetManifest> {
    if counts.train == 0 || counts.val == 0 || counts.test == 0 {
        return Err(Error::InvalidArgument(format!("every split needs at least one case, got {counts:?}")));
    }
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let mut cases = Vec::with_capacity(counts.total());
    for i in 0..counts.total() {
        let case_id = format!("case{i:04}");
        let seed = rng::derive_seed(root_seed, "case", i as u64);
        let p = generate_phantom(spec, seed)?;
        let image = PathBuf::from(format!("{case_id}.image.pdv"));
        let mask = PathBuf::from(format!("{case_id}.mask.pdv"));
        save_volume(&p.image, out_dir.join(&image))?;
        save_volume(&p.mask, out_dir.join(&mask))?;
        cases.push(CaseEntry { case_id, image, mask, split: counts.split_of(i), source_case: None, seed: Some(seed) });
    }
    let manifest = DatasetManifest { config_hash: config_hash.to_string(), root_seed, cases };
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomSpec {
        PhantomSpec { image_size: vec![32, 32], nodule_radius_range: [2.0, 3.0], ..PhantomSpec::default() }
    }

    #[test]
    fn counts_give_distinct_disjoint_ids() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_dataset(&small(), SplitCounts { train: 4, val: 2, test: 2 }, 7, dir.path(), "h").unwrap();
        assert_eq!(m.cases.len(), 8);
        let ids: BTreeSet<_> = m.cases.iter().map(|c| &c.case_id).collect();
        assert_eq!(ids.len(), 8);
        assert!(m.ids(Split::Train).is_disjoint(&m.ids(Split::Test)));
        assert!(m.ids(Split::Val).is_disjoint(&m.ids(Split::Test)));
        assert_eq!(DatasetManifest::load(dir.path().join("manifest.json")).unwrap(), m);
        let loaded = m.load_split(dir.path(), Split::Val).unwrap();
        assert_eq!(loaded.len(), 2);
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let counts = SplitCounts { train: 2, val: 1, test: 1 };
        let ma = build_dataset(&small(), counts, 99, a.path(), "h").unwrap();
        let mb = build_dataset(&small(), counts, 99, b.path(), "h").unwrap();
        assert_eq!(ma.hash(), mb.hash());
        for c in &ma.cases {
            for f in [&c.image, &c.mask] {
                assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
            }
        }
    }

    #[test]
    fn empty_split_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(build_dataset(&small(), SplitCounts { train: 0, val: 1, test: 1 }, 1, dir.path(), "h").is_err());
    }

    #[test]
    fn default_ratio_tracks_reference_split() {
        let c = SplitCounts::default();
        let reference = [553.0, 142.0, 138.0];
        let total: f64 = reference.iter().sum();
        let ours = [c.train as f64, c.val as f64, c.test as f64];
        let n = c.total() as f64;
        for (o, r) in ours.iter().zip(reference) {
            let (fo, fr) = (o / n, r / total);
            assert!((fo - fr).abs() / fr < 0.10, "{fo} vs {fr}");
        }
    }

    #[test]
    fn duplicate_id_is_leakage() {
        let e = |split| CaseEntry {
            case_id: "a".into(),
            image: "a.pdv".into(),
            mask: "b.pdv".into(),
            split,
            source_case: None,
            seed: None,
        };
        let m =
            DatasetManifest { config_hash: String::new(), root_seed: 0, cases: vec![e(Split::Train), e(Split::Test)] };
        assert!(matches!(m.validate_splits(), Err(Error::SplitLeakage(_))));
    }
}
