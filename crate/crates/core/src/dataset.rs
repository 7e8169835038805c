//! Incomplete multi-view multi-label data: storage, loading, the
//! missing-view / missing-label simulator, and train/test splitting.
//!
//! On-disk layout of a dataset directory:
//!
//! ```text
//! view_0.mvf … view_{m-1}.mvf   (or view_k.csv)
//! labels.csv                    weak label matrix Y (n × c, 0/1)
//! w.csv                         optional view index W (n × m, 0/1)
//! g.csv                         optional label index G (n × c, 0/1)
//! labels_full.csv               optional complete labels used for evaluation
//! names.json                    optional {"views": [...], "categories": [...]}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::tensor::Matrix;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Names {
    #[serde(default)]
    pub views: Vec<String>,
    #[serde(default)]
    pub categories: Vec<String>,
}

/// Per-view features plus weak labels and the two availability indices.
///
/// Rows where `W[i,v] = 0` are zero in view `v`, and `Y[i,j] = 0` wherever
/// `G[i,j] = 0`. Every sample has at least one available view.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewDataset {
    views: Vec<Matrix>,
    labels: Matrix,
    view_index: Matrix,
    label_index: Matrix,
    complete_labels: Option<Matrix>,
    names: Option<Names>,
}

impl MultiViewDataset {
    pub fn new(views: Vec<Matrix>, labels: Matrix, view_index: Matrix, label_index: Matrix) -> Result<Self> {
        let data = Self {
            views,
            labels,
            view_index,
            label_index,
            complete_labels: None,
            names: None,
        };
        data.validate()?;
        Ok(data)
    }

    /// A dataset with every view and label observed.
    pub fn complete(views: Vec<Matrix>, labels: Matrix) -> Result<Self> {
        let n = labels.rows();
        let (m, c) = (views.len(), labels.cols());
        Self::new(views, labels, Matrix::ones(n, m), Matrix::ones(n, c))
    }

    pub fn with_complete_labels(mut self, full: Matrix) -> Result<Self> {
        if full.shape() != self.labels.shape() {
            return Err(Error::dim("complete_labels", self.labels.shape(), full.shape()));
        }
        if !full.is_binary() {
            return Err(Error::Contract("complete labels must be 0/1".into()));
        }
        self.complete_labels = Some(full);
        Ok(self)
    }

    pub fn with_names(mut self, names: Names) -> Self {
        self.names = Some(names);
        self
    }

    fn validate(&self) -> Result<()> {
        let n = self.labels.rows();
        if self.views.is_empty() {
            return Err(Error::Contract("dataset needs at least one view".into()));
        }
        for (v, x) in self.views.iter().enumerate() {
            if x.rows() != n {
                return Err(Error::Contract(format!("view {v} has {} rows, labels have {n}", x.rows())));
            }
        }
        let m = self.views.len();
        if self.view_index.shape() != (n, m) {
            return Err(Error::dim("view_index", (n, m), self.view_index.shape()));
        }
        if self.label_index.shape() != self.labels.shape() {
            return Err(Error::dim("label_index", self.labels.shape(), self.label_index.shape()));
        }
        for (name, mat) in [("labels", &self.labels), ("view_index", &self.view_index), ("label_index", &self.label_index)] {
            if !mat.is_binary() {
                return Err(Error::Contract(format!("{name} entries must be 0 or 1")));
            }
        }
        for i in 0..n {
            if self.view_index.row(i).iter().all(|&w| w == 0.0) {
                return Err(Error::Contract(format!("sample {i} has no available view")));
            }
            for (v, x) in self.views.iter().enumerate() {
                if self.view_index.get(i, v) == 0.0 && x.row(i).iter().any(|&a| a != 0.0) {
                    return Err(Error::Contract(format!("sample {i} view {v} is missing but not zero-filled")));
                }
            }
            for j in 0..self.labels.cols() {
                if self.label_index.get(i, j) == 0.0 && self.labels.get(i, j) != 0.0 {
                    return Err(Error::Contract(format!("sample {i} label {j} is unknown but set")));
                }
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.labels.rows()
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn num_labels(&self) -> usize {
        self.labels.cols()
    }

    pub fn view_dims(&self) -> Vec<usize> {
        self.views.iter().map(Matrix::cols).collect()
    }

    pub fn views(&self) -> &[Matrix] {
        &self.views
    }

    pub fn labels(&self) -> &Matrix {
        &self.labels
    }

    pub fn view_index(&self) -> &Matrix {
        &self.view_index
    }

    pub fn label_index(&self) -> &Matrix {
        &self.label_index
    }

    pub fn complete_labels(&self) -> Option<&Matrix> {
        self.complete_labels.as_ref()
    }

    pub fn names(&self) -> Option<&Names> {
        self.names.as_ref()
    }

    /// Labels to score predictions against: the complete labels when known,
    /// otherwise `Y` itself when nothing is masked.
    pub fn ground_truth(&self) -> Option<&Matrix> {
        match &self.complete_labels {
            Some(full) => Some(full),
            None if self.label_index.as_slice().iter().all(|&g| g == 1.0) => Some(&self.labels),
            None => None,
        }
    }

    /// Rows `idx` in the given order.
    pub fn subset(&self, idx: &[usize]) -> MultiViewDataset {
        MultiViewDataset {
            views: self.views.iter().map(|x| x.select_rows(idx)).collect(),
            labels: self.labels.select_rows(idx),
            view_index: self.view_index.select_rows(idx),
            label_index: self.label_index.select_rows(idx),
            complete_labels: self.complete_labels.as_ref().map(|y| y.select_rows(idx)),
            names: self.names.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train_ratio: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train_ratio: 0.7, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IncompletenessSpec {
    pub view_missing_rate: f64,
    pub label_missing_rate: f64,
    pub seed: u64,
}

impl Default for IncompletenessSpec {
    fn default() -> Self {
        Self {
            view_missing_rate: 0.5,
            label_missing_rate: 0.5,
            seed: 0,
        }
    }
}

fn load_view(dir: &Path, k: usize) -> Result<Option<(PathBuf, Matrix)>> {
    let mvf = dir.join(format!("view_{k}.mvf"));
    if mvf.exists() {
        return io::load_mvf(&mvf).map(|m| Some((mvf, m)));
    }
    let csv = dir.join(format!("view_{k}.csv"));
    if csv.exists() {
        return io::load_csv(&csv).map(|m| Some((csv, m)));
    }
    Ok(None)
}

fn load_binary(path: &Path, rows: usize, cols: usize) -> Result<Matrix> {
    let m = io::load_csv(path)?;
    if m.rows() != rows {
        return Err(Error::Load {
            path: path.into(),
            msg: format!("{} rows, expected {rows}", m.rows()),
        });
    }
    if m.cols() != cols {
        return Err(Error::Load {
            path: path.into(),
            msg: format!("{} columns, expected {cols}", m.cols()),
        });
    }
    for i in 0..m.rows() {
        if let Some(v) = m.row(i).iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Row {
                path: path.into(),
                row: i,
                msg: format!("entry {v} is not 0 or 1"),
            });
        }
    }
    Ok(m)
}

/// Reads a dataset directory. Missing `w.csv` / `g.csv` mean all-ones.
/// Rows of unavailable views and unknown labels are zero-filled on load.
pub fn load_dataset(dir: &Path) -> Result<MultiViewDataset> {
    let labels_path = dir.join("labels.csv");
    if !labels_path.exists() {
        return Err(Error::Load {
            path: labels_path,
            msg: "label file not found".into(),
        });
    }
    let mut views = Vec::new();
    let mut paths = Vec::new();
    while let Some((p, m)) = load_view(dir, views.len())? {
        views.push(m);
        paths.push(p);
    }
    if views.is_empty() {
        return Err(Error::Load {
            path: dir.join("view_0.mvf"),
            msg: "no view files found".into(),
        });
    }
    let labels = io::load_csv(&labels_path)?;
    let n = labels.rows();
    let c = labels.cols();
    for i in 0..n {
        if let Some(v) = labels.row(i).iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Row {
                path: labels_path,
                row: i,
                msg: format!("label {v} is not 0 or 1"),
            });
        }
    }
    for (p, x) in paths.iter().zip(&views) {
        if x.rows() != n {
            return Err(Error::Load {
                path: p.clone(),
                msg: format!("{} rows, but labels.csv has {n}", x.rows()),
            });
        }
    }
    let m = views.len();
    let w_path = dir.join("w.csv");
    let w = if w_path.exists() { load_binary(&w_path, n, m)? } else { Matrix::ones(n, m) };
    for i in 0..n {
        if w.row(i).iter().all(|&x| x == 0.0) {
            return Err(Error::Row {
                path: w_path,
                row: i,
                msg: "sample has no available view".into(),
            });
        }
    }
    let g_path = dir.join("g.csv");
    let g = if g_path.exists() { load_binary(&g_path, n, c)? } else { Matrix::ones(n, c) };

    for (v, x) in views.iter_mut().enumerate() {
        for i in 0..n {
            if w.get(i, v) == 0.0 {
                x.row_mut(i).fill(0.0);
            }
        }
    }
    let labels = labels.zip_map(&g, |y, g| y * g)?;
    let mut data = MultiViewDataset::new(views, labels, w, g)?;

    let full_path = dir.join("labels_full.csv");
    if full_path.exists() {
        data = data.with_complete_labels(load_binary(&full_path, n, c)?)?;
    }
    let names_path = dir.join("names.json");
    if names_path.exists() {
        let names: Names = serde_json::from_slice(&fs::read(&names_path)?)?;
        data = data.with_names(names);
    }
    Ok(data)
}

/// Writes `data` in the layout [`load_dataset`] reads, views as MVF1.
pub fn save_dataset(dir: &Path, data: &MultiViewDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (v, x) in data.views.iter().enumerate() {
        io::save_mvf(&dir.join(format!("view_{v}.mvf")), x)?;
    }
    io::save_csv(&dir.join("labels.csv"), &data.labels)?;
    io::save_csv(&dir.join("w.csv"), &data.view_index)?;
    io::save_csv(&dir.join("g.csv"), &data.label_index)?;
    if let Some(full) = &data.complete_labels {
        io::save_csv(&dir.join("labels_full.csv"), full)?;
    }
    if let Some(names) = &data.names {
        fs::write(dir.join("names.json"), serde_json::to_vec_pretty(names)?)?;
    }
    Ok(())
}

/// Removes views and hides labels at the requested rates.
///
/// Each view loses exactly `⌊rate·n⌋` instances while every sample keeps at
/// least one view. Labels are hidden per category: `⌊rate·#pos⌋` of the
/// positives and `⌊rate·#neg⌋` of the negatives. The original labels are kept
/// as the dataset's complete labels.
pub fn simulate_incompleteness(data: &MultiViewDataset, spec: &IncompletenessSpec) -> Result<MultiViewDataset> {
    for (name, r) in [("view_missing_rate", spec.view_missing_rate), ("label_missing_rate", spec.label_missing_rate)] {
        if !(0.0..1.0).contains(&r) {
            return Err(Error::Contract(format!("{name} must be in [0, 1), got {r}")));
        }
    }
    if data.view_index.as_slice().iter().any(|&w| w != 1.0) || data.label_index.as_slice().iter().any(|&g| g != 1.0) {
        return Err(Error::Contract("simulate_incompleteness needs a complete dataset".into()));
    }
    let n = data.n();
    let m = data.num_views();
    let c = data.num_labels();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let per_view = (spec.view_missing_rate * n as f64).floor() as usize;
    if per_view > 0 && per_view * m > n * (m - 1) {
        return Err(Error::Simulation(format!(
            "removing {per_view} of {n} instances from each of {m} views leaves some sample with no view"
        )));
    }
    let mut w = Matrix::ones(n, m);
    let mut order: Vec<usize> = (0..n).collect();
    for v in 0..m {
        order.shuffle(&mut rng);
        for &i in &order[..per_view] {
            w.as_mut_slice()[i * m + v] = 0.0;
        }
    }
    repair_empty_rows(&mut w, &mut rng)?;

    let mut g = Matrix::ones(n, c);
    for j in 0..c {
        let (mut pos, mut neg): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| data.labels.get(i, j) == 1.0);
        for group in [&mut pos, &mut neg] {
            group.shuffle(&mut rng);
            let k = (spec.label_missing_rate * group.len() as f64).floor() as usize;
            for &i in &group[..k] {
                g.as_mut_slice()[i * c + j] = 0.0;
            }
        }
    }

    let views = data
        .views
        .iter()
        .enumerate()
        .map(|(v, x)| {
            let mut x = x.clone();
            for i in 0..n {
                if w.get(i, v) == 0.0 {
                    x.row_mut(i).fill(0.0);
                }
            }
            x
        })
        .collect();
    let labels = data.labels.zip_map(&g, |y, g| y * g)?;
    let out = MultiViewDataset {
        views,
        labels,
        view_index: w,
        label_index: g,
        complete_labels: Some(data.labels.clone()),
        names: data.names.clone(),
    };
    out.validate()?;
    Ok(out)
}

/// Restores one random view in each all-missing row, then removes that view
/// from another sample that can spare it, so column counts stay exact.
fn repair_empty_rows(w: &mut Matrix, rng: &mut ChaCha8Rng) -> Result<()> {
    let (n, m) = w.shape();
    let available = |w: &Matrix, i: usize| w.row(i).iter().filter(|&&x| x == 1.0).count();
    for i in 0..n {
        if available(w, i) > 0 {
            continue;
        }
        let v = rng.random_range(0..m);
        w.as_mut_slice()[i * m + v] = 1.0;
        let donors: Vec<usize> = (0..n)
            .filter(|&r| r != i && w.get(r, v) == 1.0 && available(w, r) >= 2)
            .collect();
        if donors.is_empty() {
            return Err(Error::Simulation(format!("cannot rebalance view {v} after restoring sample {i}")));
        }
        let r = donors[rng.random_range(0..donors.len())];
        w.as_mut_slice()[r * m + v] = 0.0;
    }
    Ok(())
}

/// Deterministic disjoint partition of `0..n`; both sides sorted.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(spec.train_ratio > 0.0 && spec.train_ratio < 1.0) {
        return Err(Error::Contract(format!("train_ratio must be in (0, 1), got {}", spec.train_ratio)));
    }
    let n_train = (spec.train_ratio * n as f64).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::Contract(format!(
            "train_ratio {} on {n} samples leaves an empty side",
            spec.train_ratio
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Splits by explicit row sets. The training side drops the complete labels;
/// the test side is scored against them, so its `G` becomes all-ones.
pub fn split_at(data: &MultiViewDataset, train_idx: &[usize], test_idx: &[usize]) -> Result<(MultiViewDataset, MultiViewDataset)> {
    let truth = data
        .ground_truth()
        .ok_or_else(|| Error::Contract("test split needs complete labels (labels_full.csv)".into()))?
        .clone();
    let n = data.n();
    let mut seen = vec![false; n];
    for &i in train_idx.iter().chain(test_idx) {
        if i >= n || seen[i] {
            return Err(Error::Contract(format!("row {i} is out of range or assigned twice")));
        }
        seen[i] = true;
    }
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::Contract("split leaves an empty side".into()));
    }
    let mut train = data.subset(train_idx);
    train.complete_labels = None;
    let mut test = data.subset(test_idx);
    test.labels = truth.select_rows(test_idx);
    test.label_index = Matrix::ones(test_idx.len(), data.num_labels());
    test.complete_labels = None;
    Ok((train, test))
}

pub fn split(data: &MultiViewDataset, spec: &SplitSpec) -> Result<(MultiViewDataset, MultiViewDataset)> {
    let (train, test) = split_indices(data.n(), spec)?;
    split_at(data, &train, &test)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n: usize,
    pub view_dims: Vec<usize>,
    pub num_labels: usize,
    pub latent_dim: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 600,
            view_dims: vec![40, 60],
            num_labels: 5,
            latent_dim: 8,
            noise: 1.0,
            seed: 0,
        }
    }
}

/// Samples from `num_labels` overlapping latent prototypes.
///
/// Each sample draws 1–3 distinct labels; its latent vector is the sum of the
/// chosen prototypes plus `noise`-scaled Gaussian jitter, and view `v` is a
/// fixed random linear map of that vector plus `noise`-scaled view noise.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<MultiViewDataset> {
    let c = spec.num_labels;
    if c == 0 || spec.view_dims.is_empty() || spec.n == 0 {
        return Err(Error::Contract("synthetic data needs n, views and labels".into()));
    }
    if spec.latent_dim < c {
        return Err(Error::Contract(format!(
            "latent_dim {} must be at least the label count {c}",
            spec.latent_dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let k = spec.latent_dim;
    let protos = Matrix::from_fn(c, k, |_, _| normal(&mut rng));
    let scale = 1.0 / (k as f64).sqrt();
    let maps: Vec<Matrix> = spec
        .view_dims
        .iter()
        .map(|&d| Matrix::from_fn(k, d, |_, _| normal(&mut rng) * scale))
        .collect();

    let mut labels = Matrix::zeros(spec.n, c);
    let mut latent = Matrix::zeros(spec.n, k);
    let mut all: Vec<usize> = (0..c).collect();
    for i in 0..spec.n {
        let count = rng.random_range(1..=3usize.min(c));
        all.shuffle(&mut rng);
        let mut chosen = all[..count].to_vec();
        chosen.sort_unstable();
        let z = latent.row_mut(i);
        for &j in &chosen {
            labels.as_mut_slice()[i * c + j] = 1.0;
            for (zv, p) in z.iter_mut().zip(protos.row(j)) {
                *zv += p;
            }
        }
        for zv in z.iter_mut() {
            *zv += spec.noise * normal(&mut rng);
        }
    }
    let views = maps
        .iter()
        .map(|a| {
            let mut x = latent.matmul(a)?;
            for v in x.as_mut_slice() {
                *v += spec.noise * normal(&mut rng);
            }
            Ok(x)
        })
        .collect::<Result<Vec<_>>>()?;
    MultiViewDataset::complete(views, labels)
}
