//! Directories of episodes with a train/val/test split listed in `dataset.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::episode::{load_episode, Episode};
use crate::error::{Error, Result};

pub const DATASET_FILE: &str = "dataset.json";
pub const EPISODES_DIR: &str = "episodes";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// First `round(f_train n)` ids go to train, the next `round(f_val n)` to val, the
    /// rest to test.
    pub fn by_index(ids: &[String], fractions: [f64; 3]) -> Result<Self> {
        let total: f64 = fractions.iter().sum();
        if fractions.iter().any(|f| f.is_nan() || *f < 0.0) || total <= 0.0 {
            return Err(Error::Config(format!(
                "invalid split fractions {fractions:?}"
            )));
        }
        let n = ids.len();
        let n_train = ((fractions[0] / total * n as f64).round() as usize).min(n);
        let n_val = ((fractions[1] / total * n as f64).round() as usize).min(n - n_train);
        Ok(Splits {
            train: ids[..n_train].to_vec(),
            val: ids[n_train..n_train + n_val].to_vec(),
            test: ids[n_train + n_val..].to_vec(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub episodes: Vec<String>,
    pub splits: Splits,
}

impl DatasetManifest {
    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(DATASET_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let path = root.join(DATASET_FILE);
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    }
}

pub fn episode_dir(root: &Path, id: &str) -> PathBuf {
    root.join(EPISODES_DIR).join(id)
}

/// Every episode directory under `root`: the `episodes/` listing of a dataset, or the
/// immediate subdirectories holding a `manifest.json`. Sorted by name.
pub fn episode_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let base = if root.join(EPISODES_DIR).is_dir() {
        root.join(EPISODES_DIR)
    } else {
        root.to_path_buf()
    };
    if base.join("manifest.json").is_file() {
        return Ok(vec![base]);
    }
    let mut dirs = Vec::new();
    for entry in fs::read_dir(&base).map_err(|e| Error::io(&base, e))? {
        let p = entry.map_err(|e| Error::io(&base, e))?.path();
        if p.join("manifest.json").is_file() {
            dirs.push(p);
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Loads one split of a dataset. Without `dataset.json`, every episode under `root`
/// belongs to every split.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<Episode>> {
    if root.join(DATASET_FILE).is_file() {
        let manifest = DatasetManifest::read(root)?;
        manifest
            .splits
            .get(split)
            .iter()
            .map(|id| load_episode(&episode_dir(root, id)))
            .collect()
    } else {
        load_all(root)
    }
}

pub fn load_all(root: &Path) -> Result<Vec<Episode>> {
    episode_dirs(root)?
        .iter()
        .map(|d| load_episode(d))
        .collect()
}
