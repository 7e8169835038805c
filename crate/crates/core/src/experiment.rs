//! Experiment configuration and prepared-dataset directories.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{
    generate_synthetic, load_dataset, save_dataset, simulate_incompleteness, split_at, split_indices,
    IncompletenessSpec, MultiViewDataset, SplitSpec, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

pub const MANIFEST_FILE: &str = "split.json";

/// Exactly one of `path` (a dataset directory with complete data) or
/// `synthetic` must be set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

impl DatasetSource {
    pub fn validate(&self) -> Result<()> {
        match (&self.path, &self.synthetic) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => Err(Error::Config("dataset needs exactly one of `path` or `synthetic`".into())),
        }
    }

    pub fn load(&self) -> Result<MultiViewDataset> {
        self.validate()?;
        match (&self.path, &self.synthetic) {
            (Some(p), _) => load_dataset(p),
            (_, Some(spec)) => generate_synthetic(spec),
            _ => unreachable!(),
        }
    }

    pub fn describe(&self) -> String {
        match (&self.path, &self.synthetic) {
            (Some(p), _) => p.display().to_string(),
            (_, Some(s)) => format!("synthetic(n={}, views={:?}, labels={}, seed={})", s.n, s.view_dims, s.num_labels, s.seed),
            _ => "unset".into(),
        }
    }
}

fn default_repeats() -> usize {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Everything but `dataset` may be omitted. Repeat `r` uses seed `seed + r`
/// for incompleteness, splitting, initialization and training; the seeds in
/// the individual sections are overwritten.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub incompleteness: IncompletenessSpec,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn new(dataset: DatasetSource) -> Self {
        Self {
            dataset,
            incompleteness: IncompletenessSpec::default(),
            split: SplitSpec::default(),
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            repeats: default_repeats(),
            seed: 0,
            output_dir: default_output_dir(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.into(),
            msg: e.to_string(),
        })?;
        Self::from_toml(&text).map_err(|e| Error::Load {
            path: path.into(),
            msg: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if !(self.split.train_ratio > 0.0 && self.split.train_ratio < 1.0) {
            return Err(Error::Config(format!("train_ratio must be in (0, 1), got {}", self.split.train_ratio)));
        }
        for (name, r) in [
            ("view_missing_rate", self.incompleteness.view_missing_rate),
            ("label_missing_rate", self.incompleteness.label_missing_rate),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {r}")));
            }
        }
        self.train.validate()
    }

    pub fn repeat_seed(&self, repeat: usize) -> u64 {
        self.seed.wrapping_add(repeat as u64)
    }

    /// The configuration of repeat `r` with every seed set to `seed + r`.
    pub fn for_repeat(&self, repeat: usize) -> Self {
        let s = self.repeat_seed(repeat);
        let mut cfg = self.clone();
        cfg.incompleteness.seed = s;
        cfg.split.seed = s;
        cfg.train.seed = s;
        cfg
    }
}

/// How a prepared directory was produced, plus its split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedManifest {
    pub source: String,
    pub seed: u64,
    pub incompleteness: IncompletenessSpec,
    pub split: SplitSpec,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Incomplete dataset and split for one repeat, using the repeat's seeds.
pub fn prepare(cfg: &ExperimentConfig, repeat: usize) -> Result<(MultiViewDataset, PreparedManifest)> {
    let cfg = cfg.for_repeat(repeat);
    let full = cfg.dataset.load()?;
    let data = simulate_incompleteness(&full, &cfg.incompleteness)?;
    let (train, test) = split_indices(data.n(), &cfg.split)?;
    Ok((
        data,
        PreparedManifest {
            source: cfg.dataset.describe(),
            seed: cfg.train.seed,
            incompleteness: cfg.incompleteness,
            split: cfg.split,
            train,
            test,
        },
    ))
}

pub fn write_prepared(dir: &Path, data: &MultiViewDataset, manifest: &PreparedManifest) -> Result<()> {
    save_dataset(dir, data)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(manifest)?)?;
    Ok(())
}

pub struct Prepared {
    pub data: MultiViewDataset,
    pub manifest: PreparedManifest,
    pub train: MultiViewDataset,
    pub test: MultiViewDataset,
}

pub fn load_prepared(dir: &Path) -> Result<Prepared> {
    let data = load_dataset(dir)?;
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::Load {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    let manifest: PreparedManifest = serde_json::from_slice(&bytes).map_err(|e| Error::Load {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    if manifest.train.iter().chain(&manifest.test).any(|&i| i >= data.n()) {
        return Err(Error::Load {
            path,
            msg: format!("split index out of range for {} samples", data.n()),
        });
    }
    let (train, test) = split_at(&data, &manifest.train, &manifest.test)?;
    Ok(Prepared {
        data,
        manifest,
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_toml_is_fully_defaulted() {
        let cfg = ExperimentConfig::from_toml("[dataset.synthetic]\nn = 50\n").unwrap();
        assert_eq!(cfg.dataset.synthetic.as_ref().unwrap().n, 50);
        assert_eq!(cfg.dataset.synthetic.as_ref().unwrap().view_dims, vec![40, 60]);
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.repeats, 1);
        assert_eq!(cfg.split.train_ratio, 0.7);
    }

    #[test]
    fn dataset_source_is_required_and_exclusive() {
        assert!(ExperimentConfig::from_toml("repeats = 2\n").is_err());
        assert!(ExperimentConfig::from_toml("[dataset]\n").is_err());
        assert!(ExperimentConfig::from_toml("[dataset]\npath = \"x\"\n[dataset.synthetic]\nn = 5\n").is_err());
        assert!(ExperimentConfig::from_toml("[dataset]\npath = \"x\"\nbogus = 1\n").is_err());
    }

    #[test]
    fn toml_round_trip_and_overrides() {
        let text = "seed = 7\n[dataset]\npath = \"data/corel\"\n[train]\nalpha = 0.1\nepochs = 3\n[model]\nhidden = [16]\n";
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.train.weights.alpha, 0.1);
        assert_eq!(cfg.train.weights.beta, 0.4);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model.hidden, vec![16]);
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        let r = cfg.for_repeat(2);
        assert_eq!((r.train.seed, r.split.seed, r.incompleteness.seed), (9, 9, 9));
    }

    #[test]
    fn prepared_directory_round_trip() {
        let mut cfg = ExperimentConfig::new(DatasetSource {
            path: None,
            synthetic: Some(SyntheticSpec {
                n: 40,
                view_dims: vec![3, 4],
                num_labels: 3,
                ..SyntheticSpec::default()
            }),
        });
        cfg.seed = 5;
        let dir = tempfile::tempdir().unwrap();
        let (data, manifest) = prepare(&cfg, 1).unwrap();
        assert_eq!(manifest.seed, 6);
        write_prepared(dir.path(), &data, &manifest).unwrap();
        let p = load_prepared(dir.path()).unwrap();
        assert_eq!(p.manifest, manifest);
        assert_eq!(p.data.view_index(), data.view_index());
        assert_eq!(p.train.n(), 28);
        assert_eq!(p.test.n(), 12);
        let (other, _) = prepare(&cfg, 2).unwrap();
        assert_ne!(other.view_index(), data.view_index());
    }
}
