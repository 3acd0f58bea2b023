use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{read_file, write_file};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One training sample. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub frame_prev_path: PathBuf,
    pub frame_curr_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stereo_right_path: Option<PathBuf>,
    pub mask_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow_path: Option<PathBuf>,
    /// Stem of a `<calib_id>.json` stereo calibration next to the manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calib_id: Option<String>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            entries,
            base_dir: base_dir.into(),
        }
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn calib_path(&self, entry: &ManifestEntry) -> Option<PathBuf> {
        entry
            .calib_id
            .as_ref()
            .map(|id| self.base_dir.join(format!("{id}.json")))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Parse a manifest and check that every referenced file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut manifest: DatasetManifest = serde_json::from_slice(&read_file(path)?)?;
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for entry in &manifest.entries {
            let mut files = vec![&entry.frame_prev_path, &entry.frame_curr_path, &entry.mask_path];
            files.extend(entry.stereo_right_path.as_ref());
            files.extend(entry.flow_path.as_ref());
            for rel in files {
                let full = manifest.resolve(rel);
                if !full.is_file() {
                    return Err(Error::Validation(format!(
                        "manifest references missing file {}",
                        full.display()
                    )));
                }
            }
            if let Some(calib) = manifest.calib_path(entry) {
                if !calib.is_file() {
                    return Err(Error::Validation(format!(
                        "manifest references missing calibration {}",
                        calib.display()
                    )));
                }
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_file(path.as_ref(), text.as_bytes())
    }
}

/// Fractions of the dataset assigned to train / val / test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.80,
            val: 0.05,
            test: 0.15,
        }
    }
}

/// Assign `n` samples to splits in the given proportions via a seeded
/// shuffle. Train and val counts are rounded; test takes the remainder.
pub fn assign_splits(n: usize, fractions: SplitFractions, seed: u64) -> Result<Vec<Split>> {
    let SplitFractions { train, val, test } = fractions;
    if [train, val, test].iter().any(|f| !(0.0..=1.0).contains(f))
        || ((train + val + test) - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split fractions {train}:{val}:{test} must be in [0,1] and sum to 1"
        )));
    }
    let n_train = ((n as f64) * train).round() as usize;
    let n_val = (((n as f64) * val).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut splits = vec![Split::Test; n];
    for (rank, &idx) in order.iter().enumerate() {
        splits[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_split_of_100() {
        let s = assign_splits(100, SplitFractions::default(), 3).unwrap();
        let count = |k| s.iter().filter(|&&x| x == k).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (80, 5, 15));
        assert_eq!(s, assign_splits(100, SplitFractions::default(), 3).unwrap());
        assert_ne!(s, assign_splits(100, SplitFractions::default(), 4).unwrap());
    }

    #[test]
    fn bad_fractions_rejected() {
        let f = SplitFractions {
            train: 0.9,
            val: 0.2,
            test: 0.1,
        };
        assert!(assign_splits(10, f, 0).is_err());
    }

    #[test]
    fn json_field_names_are_stable() {
        let e = ManifestEntry {
            frame_prev_path: "a.pgm".into(),
            frame_curr_path: "b.pgm".into(),
            stereo_right_path: None,
            mask_path: "m.pgm".into(),
            flow_path: Some("f.flo".into()),
            calib_id: None,
            split: Split::Val,
        };
        let v = serde_json::to_value(&e).unwrap();
        assert_eq!(v["split"], "val");
        assert_eq!(v["flow_path"], "f.flo");
        assert!(v.get("stereo_right_path").is_none());
    }

    #[test]
    fn load_rejects_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest::new(
            vec![ManifestEntry {
                frame_prev_path: "nope.pgm".into(),
                frame_curr_path: "nope.pgm".into(),
                stereo_right_path: None,
                mask_path: "nope.pgm".into(),
                flow_path: None,
                calib_id: None,
                split: Split::Train,
            }],
            dir.path(),
        );
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        assert!(matches!(DatasetManifest::load(&path), Err(Error::Validation(_))));
    }
}
