//! Stratified splits and the on-disk dataset manifest.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate_with, load_ply, write_ply, FeatureMode, LabeledSample, ShapeClass, SyntheticConfig};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

/// Disjoint train/val/test sample ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Largest-remainder apportionment of `total` by `weights`.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut out: Vec<usize> = raw.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let short = total - out.iter().sum::<usize>();
    for &i in order.iter().cycle().take(short) {
        out[i] += 1;
    }
    out
}

/// Splits `(id, label)` pairs per class with `ratios = (train, val, test)`.
///
/// Totals match the largest-remainder apportionment of the whole set, and
/// every class gets the same treatment up to one sample per split.
pub fn split_dataset(samples: &[(String, usize)], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if ratios.iter().any(|&r| !(r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be positive and sum to 1")));
    }
    let n_classes = samples.iter().map(|s| s.1 + 1).max().unwrap_or(0);
    let mut by_class: Vec<Vec<&str>> = vec![Vec::new(); n_classes];
    for (id, label) in samples {
        by_class[*label].push(id);
    }
    for (c, ids) in by_class.iter().enumerate() {
        if ids.len() < 3 {
            return Err(Error::Data(format!("class {c} has {} samples, fewer than the 3 splits", ids.len())));
        }
    }

    let targets = apportion(samples.len(), &ratios);
    let mut remaining = targets.clone();
    let mut alloc: Vec<[usize; 3]> = Vec::with_capacity(n_classes);
    // floors first so the per-class shortfall is settled against the global targets
    for ids in &by_class {
        let n = ids.len() as f64;
        let a: [usize; 3] = std::array::from_fn(|s| (ratios[s] * n).floor() as usize);
        for s in 0..3 {
            remaining[s] -= a[s];
        }
        alloc.push(a);
    }
    for (c, ids) in by_class.iter().enumerate() {
        let n = ids.len();
        let frac: [f64; 3] = std::array::from_fn(|s| ratios[s] * n as f64 - alloc[c][s] as f64);
        while alloc[c].iter().sum::<usize>() < n {
            let s = (0..3)
                .filter(|&s| remaining[s] > 0)
                .max_by(|&a, &b| frac[a].total_cmp(&frac[b]).then(b.cmp(&a)))
                .unwrap_or(0);
            alloc[c][s] += 1;
            remaining[s] = remaining[s].saturating_sub(1);
        }
        if alloc[c][0] == 0 {
            let donor = if alloc[c][1] >= alloc[c][2] { 1 } else { 2 };
            alloc[c][donor] -= 1;
            alloc[c][0] += 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = DatasetSplit::default();
    for (c, ids) in by_class.iter().enumerate() {
        let mut ids: Vec<&str> = ids.clone();
        ids.shuffle(&mut rng);
        let [a, b, _] = alloc[c];
        split.train.extend(ids[..a].iter().map(|s| s.to_string()));
        split.val.extend(ids[a..a + b].iter().map(|s| s.to_string()));
        split.test.extend(ids[a + b..].iter().map(|s| s.to_string()));
    }
    Ok(split)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub feature_mode: FeatureMode,
    pub class_names: Vec<String>,
    pub samples: Vec<ManifestEntry>,
    pub split: DatasetSplit,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "manifest version {} unsupported (expected {MANIFEST_VERSION})",
                m.version
            )));
        }
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    fn validate(&self) -> Result<()> {
        let mut labels = HashMap::new();
        for e in &self.samples {
            if e.label >= self.class_names.len() {
                return Err(Error::Data(format!("sample {:?} has label {} out of range", e.id, e.label)));
            }
            if labels.insert(e.id.as_str(), e.label).is_some() {
                return Err(Error::Data(format!("duplicate sample id {:?}", e.id)));
            }
        }
        let mut seen = HashMap::new();
        for (name, ids) in [("train", &self.split.train), ("val", &self.split.val), ("test", &self.split.test)] {
            for id in ids {
                if !labels.contains_key(id.as_str()) {
                    return Err(Error::Data(format!("{name} split lists unknown sample {id:?}")));
                }
                if let Some(prev) = seen.insert(id.as_str(), name) {
                    return Err(Error::Data(format!("sample {id:?} is in both {prev} and {name}")));
                }
            }
        }
        if seen.len() != labels.len() {
            return Err(Error::Data("splits do not cover every sample".into()));
        }
        let mut in_train = vec![false; self.class_names.len()];
        for id in &self.split.train {
            in_train[labels[id.as_str()]] = true;
        }
        if let Some(c) = in_train.iter().position(|x| !x) {
            return Err(Error::Data(format!("class {:?} missing from train", self.class_names[c])));
        }
        Ok(())
    }
}

/// Loaded samples keyed by their split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub feature_mode: FeatureMode,
    pub grid_size: usize,
    pub samples: Vec<LabeledSample>,
    pub split: DatasetSplit,
    index: HashMap<String, usize>,
}

impl Dataset {
    pub fn new(
        class_names: Vec<String>,
        feature_mode: FeatureMode,
        grid_size: usize,
        samples: Vec<LabeledSample>,
        split: DatasetSplit,
    ) -> Result<Self> {
        let index: HashMap<String, usize> = samples.iter().enumerate().map(|(i, s)| (s.id.clone(), i)).collect();
        for id in split.train.iter().chain(&split.val).chain(&split.test) {
            if !index.contains_key(id) {
                return Err(Error::Data(format!("split lists unknown sample {id:?}")));
            }
        }
        Ok(Self {
            class_names,
            feature_mode,
            grid_size,
            samples,
            split,
            index,
        })
    }

    /// Reads every PLY named in the manifest and voxelizes at `grid_size`.
    pub fn load(manifest_path: impl AsRef<Path>, grid_size: usize) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let manifest = Manifest::read(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let mode = manifest.feature_mode;
        let samples = manifest
            .samples
            .par_iter()
            .map(|e| {
                let path = root.join(&e.path);
                let prims = load_ply(&path, mode)?;
                LabeledSample::new(e.id.clone(), e.label, mode, prims, grid_size)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(manifest.class_names, mode, grid_size, samples, manifest.split)
    }

    /// Writes `ply/<id>.ply` per sample plus `manifest.json` under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<Manifest> {
        let dir = dir.as_ref();
        let ply_dir = dir.join("ply");
        fs::create_dir_all(&ply_dir).map_err(|e| Error::io(&ply_dir, e))?;
        let samples = self
            .samples
            .par_iter()
            .map(|s| {
                let rel = PathBuf::from("ply").join(format!("{}.ply", s.id));
                write_ply(&s.primitives, dir.join(&rel), self.feature_mode)?;
                Ok(ManifestEntry {
                    id: s.id.clone(),
                    path: rel,
                    label: s.label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            feature_mode: self.feature_mode,
            class_names: self.class_names.clone(),
            samples,
            split: self.split.clone(),
        };
        manifest.validate()?;
        manifest.write(dir.join("manifest.json"))?;
        Ok(manifest)
    }

    /// `per_class` samples of each listed class, split by `ratios`.
    pub fn synthetic(
        config: &SyntheticConfig,
        classes: &[ShapeClass],
        per_class: usize,
        n_primitives: usize,
        ratios: [f64; 3],
        seed: u64,
    ) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Config("no classes requested".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let jobs: Vec<(usize, ShapeClass, usize, u64)> = classes
            .iter()
            .enumerate()
            .flat_map(|(label, &c)| (0..per_class).map(move |i| (label, c, i)))
            .map(|(label, c, i)| (label, c, i, rng.random()))
            .collect();
        let samples = jobs
            .par_iter()
            .map(|&(label, class, i, s)| {
                let mut sample = generate_with(config, class, n_primitives, s)?;
                sample.id = format!("{class}-{i:04}");
                sample.label = label;
                Ok(sample)
            })
            .collect::<Result<Vec<_>>>()?;
        let pairs: Vec<(String, usize)> = samples.iter().map(|s| (s.id.clone(), s.label)).collect();
        let split = split_dataset(&pairs, ratios, rng.random())?;
        Self::new(
            classes.iter().map(|c| c.to_string()).collect(),
            config.feature_mode,
            config.grid_size,
            samples,
            split,
        )
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn get(&self, id: &str) -> Option<&LabeledSample> {
        self.index.get(id).map(|&i| &self.samples[i])
    }

    fn resolve(&self, ids: &[String]) -> Vec<&LabeledSample> {
        ids.iter().map(|id| &self.samples[self.index[id]]).collect()
    }

    pub fn train(&self) -> Vec<&LabeledSample> {
        self.resolve(&self.split.train)
    }

    pub fn val(&self) -> Vec<&LabeledSample> {
        self.resolve(&self.split.val)
    }

    pub fn test(&self) -> Vec<&LabeledSample> {
        self.resolve(&self.split.test)
    }

    /// Same samples re-voxelized on a different grid.
    pub fn regrid(&self, grid_size: usize) -> Result<Self> {
        let samples = self.samples.iter().map(|s| s.regrid(grid_size)).collect::<Result<Vec<_>>>()?;
        Self::new(self.class_names.clone(), self.feature_mode, grid_size, samples, self.split.clone())
    }
}
