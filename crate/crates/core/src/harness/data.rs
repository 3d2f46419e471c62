//! Synthetic Gaussian-mixture classification data.
//!
//! Every class is a small mixture of isotropic Gaussian components. The
//! normal class gets more, wider components than the positive classes, so a
//! shallow model can mostly isolate it while the positive classes need more
//! capacity to tell apart.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mixture components per positive class.
pub const POSITIVE_COMPONENTS: usize = 3;
/// Mixture components of the normal class.
pub const NORMAL_COMPONENTS: usize = 6;
/// Spread multiplier of normal-class components.
pub const NORMAL_SPREAD: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    /// Generating mixture component of each sample.
    pub components: Vec<usize>,
    pub num_classes: usize,
    pub normal_class: usize,
}

impl Dataset {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        components: Vec<usize>,
        num_classes: usize,
        normal_class: usize,
    ) -> Result<Self> {
        let d = Dataset {
            features,
            labels,
            components,
            num_classes,
            normal_class,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.shape().len() != 2 || self.features.rows() != self.labels.len() {
            return Err(Error::config("dataset.features", "expected one feature row per label"));
        }
        if self.components.len() != self.labels.len() {
            return Err(Error::config("dataset.components", "expected one component per label"));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::config("dataset.labels", format!("label {l} >= num_classes")));
        }
        if self.normal_class >= self.num_classes {
            return Err(Error::config("dataset.normal_class", "must be below num_classes"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn is_positive(&self, i: usize) -> bool {
        self.labels[i] != self.normal_class
    }

    pub fn positive_count(&self) -> usize {
        (0..self.len()).filter(|&i| self.is_positive(i)).count()
    }

    pub fn normal_fraction(&self) -> f64 {
        (self.len() - self.positive_count()) as f64 / self.len() as f64
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            components: idx.iter().map(|&i| self.components[i]).collect(),
            num_classes: self.num_classes,
            normal_class: self.normal_class,
        }
    }

    /// Per-class shuffled split; `val_fraction` of each class (rounded) goes
    /// to the second part. Both parts keep the original sample order.
    pub fn stratified_split(&self, val_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::new();
        let mut val = Vec::new();
        for c in 0..self.num_classes {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            idx.shuffle(&mut rng);
            let k = (idx.len() as f64 * val_fraction).round() as usize;
            val.extend_from_slice(&idx[..k]);
            train.extend_from_slice(&idx[k..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        (self.subset(&train), self.subset(&val))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "defaults::num_classes")]
    pub num_classes: usize,
    #[serde(default = "defaults::dim")]
    pub dim: usize,
    #[serde(default = "defaults::samples")]
    pub samples: usize,
    #[serde(default = "defaults::normal_fraction")]
    pub normal_fraction: f64,
    #[serde(default)]
    pub normal_class: usize,
    #[serde(default = "defaults::difficulty")]
    pub difficulty: f64,
    #[serde(default = "defaults::val_fraction")]
    pub val_fraction: f64,
}

mod defaults {
    pub fn num_classes() -> usize {
        7
    }
    pub fn dim() -> usize {
        16
    }
    pub fn samples() -> usize {
        10_000
    }
    pub fn normal_fraction() -> f64 {
        0.4
    }
    pub fn difficulty() -> f64 {
        0.9
    }
    pub fn val_fraction() -> f64 {
        0.2
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            num_classes: defaults::num_classes(),
            dim: defaults::dim(),
            samples: defaults::samples(),
            normal_fraction: defaults::normal_fraction(),
            normal_class: 0,
            difficulty: defaults::difficulty(),
            val_fraction: defaults::val_fraction(),
        }
    }
}

/// Draws `n` samples of dimension `d`; exactly `round(n · normal_fraction)`
/// belong to the normal class (class 0) and the rest are spread evenly over
/// the positive classes. `difficulty` is the per-axis standard deviation of
/// positive components relative to unit-variance component centers, so 0
/// gives point masses.
pub fn gen_dataset(
    num_classes: usize,
    d: usize,
    n: usize,
    normal_fraction: f64,
    seed: u64,
    difficulty: f64,
) -> Result<Dataset> {
    gen_dataset_with_normal(num_classes, d, n, normal_fraction, 0, seed, difficulty)
}

pub fn gen_dataset_with_normal(
    num_classes: usize,
    d: usize,
    n: usize,
    normal_fraction: f64,
    normal_class: usize,
    seed: u64,
    difficulty: f64,
) -> Result<Dataset> {
    if d == 0 || n == 0 {
        return Err(Error::usage("dataset needs positive dimension and sample count"));
    }
    if num_classes < 2 || n < num_classes {
        return Err(Error::usage(format!(
            "need num_classes >= 2 and n >= num_classes, got {num_classes} classes for {n} samples"
        )));
    }
    if normal_class >= num_classes {
        return Err(Error::usage("normal_class must be below num_classes"));
    }
    if !(0.0..=1.0).contains(&normal_fraction) || !(difficulty >= 0.0 && difficulty.is_finite()) {
        return Err(Error::usage("normal_fraction must be in [0, 1] and difficulty non-negative"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = Normal::new(0.0, 1.0).expect("unit normal");

    // component layout: normal components first, then positives class by class
    let mut comp_class = Vec::new();
    let mut comp_spread = Vec::new();
    for c in 0..num_classes {
        let (k, spread) = if c == normal_class {
            (NORMAL_COMPONENTS, NORMAL_SPREAD)
        } else {
            (POSITIVE_COMPONENTS, 1.0)
        };
        for _ in 0..k {
            comp_class.push(c);
            comp_spread.push(spread * difficulty);
        }
    }
    let centers: Vec<Vec<f64>> = comp_class
        .iter()
        .map(|_| (0..d).map(|_| std.sample(&mut rng)).collect())
        .collect();

    let n_normal = ((n as f64) * normal_fraction).round() as usize;
    let n_pos = n - n_normal;
    let positives: Vec<usize> = (0..num_classes).filter(|&c| c != normal_class).collect();
    let mut counts = vec![0usize; num_classes];
    counts[normal_class] = n_normal;
    for (i, &c) in positives.iter().enumerate() {
        counts[c] = n_pos / positives.len() + usize::from(i < n_pos % positives.len());
    }

    let mut labels = Vec::with_capacity(n);
    let mut components = Vec::with_capacity(n);
    for (c, &count) in counts.iter().enumerate() {
        let comps: Vec<usize> = (0..comp_class.len()).filter(|&k| comp_class[k] == c).collect();
        for j in 0..count {
            labels.push(c);
            components.push(comps[j % comps.len()]);
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let mut features = Vec::with_capacity(n * d);
    let mut out_labels = Vec::with_capacity(n);
    let mut out_comps = Vec::with_capacity(n);
    for &i in &order {
        let k = components[i];
        let s = comp_spread[k];
        features.extend(centers[k].iter().map(|&m| m + s * std.sample(&mut rng)));
        out_labels.push(labels[i]);
        out_comps.push(k);
    }
    Dataset::new(Tensor::matrix(n, d, features), out_labels, out_comps, num_classes, normal_class)
}

pub fn gen_from_config(cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    gen_dataset_with_normal(
        cfg.num_classes,
        cfg.dim,
        cfg.samples,
        cfg.normal_fraction,
        cfg.normal_class,
        seed,
        cfg.difficulty,
    )
}

/// Train/validation pair as written to disk by `gen-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitData {
    pub train: Dataset,
    pub val: Dataset,
}

impl SplitData {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = crate::nn::checkpoint::to_string("dataset", self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data: SplitData = crate::nn::checkpoint::load(path, "dataset")?;
        data.train.validate()?;
        data.val.validate()?;
        Ok(data)
    }
}
