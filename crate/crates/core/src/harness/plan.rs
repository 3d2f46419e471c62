//! Experiment plans: everything a run needs, read from a TOML file.
//!
//! Missing sections fall back to the standard desk-scale setup: 7 classes of
//! 16-d mixture data, an edge MLP with one 8-unit hidden layer, a cloud with
//! a 64-unit stem and three residual blocks, and one 2-block adapter from
//! the edge hidden layer into the cloud's last hidden layer.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::DataConfig;
use crate::error::{Error, Result};
use crate::models::{LayerKind, ModelDef, MAX_ADAPTER_BLOCKS};
use crate::policy::EccPolicy;
use crate::train::{Stage, TrainConfig};

pub const DEFAULT_C1: f64 = 0.8;
pub const DEFAULT_C2_GRID: [f64; 6] = [0.2, 0.25, 0.3, 0.35, 0.4, 0.45];

/// How recall boosting enters edge training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecallBoost {
    #[default]
    Off,
    /// Distill first, then continue on the two-objective `{CE, positive CE}`
    /// bundle with the edge config.
    Phased,
    /// One min-norm bundle `{CE, positive CE, KD}` for the whole edge stage.
    /// The KD gradient touches mostly adapter weights, so its small norm can
    /// dominate the min-norm weights and slow the edge down.
    Combined,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterDef {
    pub name: String,
    pub edge_tap: usize,
    pub cloud_tap: usize,
    pub blocks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    #[serde(default = "defaults::cloud_train")]
    pub cloud: TrainConfig,
    /// Edge training with distillation through the first adapter.
    #[serde(default = "defaults::edge_train")]
    pub edge: TrainConfig,
    /// Distillation of any further adapter with the edge held fixed.
    #[serde(default = "defaults::adapter_train")]
    pub adapter: TrainConfig,
    #[serde(default = "defaults::finetune")]
    pub finetune: TrainConfig,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            cloud: defaults::cloud_train(),
            edge: defaults::edge_train(),
            adapter: defaults::adapter_train(),
            finetune: defaults::finetune(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepDef {
    pub adapter: String,
    #[serde(default = "defaults::c1")]
    pub c1: f64,
    #[serde(default = "defaults::c2_grid")]
    pub c2_grid: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "defaults::edge")]
    pub edge: ModelDef,
    #[serde(default = "defaults::cloud")]
    pub cloud: ModelDef,
    #[serde(default = "defaults::adapters")]
    pub adapters: Vec<AdapterDef>,
    #[serde(default)]
    pub train: TrainPlan,
    #[serde(default)]
    pub recall_boost: RecallBoost,
    #[serde(default = "defaults::policies")]
    pub policies: Vec<EccPolicy>,
    #[serde(default = "defaults::sweep")]
    pub sweep: Option<SweepDef>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            seed: 0,
            data: DataConfig::default(),
            edge: defaults::edge(),
            cloud: defaults::cloud(),
            adapters: defaults::adapters(),
            train: TrainPlan::default(),
            recall_boost: RecallBoost::Off,
            policies: defaults::policies(),
            sweep: defaults::sweep(),
            output_dir: None,
        }
    }
}

mod defaults {
    use super::*;

    pub fn c1() -> f64 {
        DEFAULT_C1
    }
    pub fn c2_grid() -> Vec<f64> {
        DEFAULT_C2_GRID.to_vec()
    }
    pub fn edge() -> ModelDef {
        ModelDef::mlp("edge", &[8], 7, vec![0])
    }
    pub fn cloud() -> ModelDef {
        ModelDef::residual("cloud", 64, 3, 7, vec![1, 2, 3])
    }
    pub fn adapters() -> Vec<AdapterDef> {
        vec![AdapterDef {
            name: "a2".into(),
            edge_tap: 0,
            cloud_tap: 3,
            blocks: 2,
        }]
    }
    pub fn policies() -> Vec<EccPolicy> {
        let mut p = vec![EccPolicy::independent(DEFAULT_C1), EccPolicy::adaptive(DEFAULT_C1, "a2")];
        p.extend(DEFAULT_C2_GRID.iter().map(|&c2| EccPolicy::dynamic(DEFAULT_C1, c2, "a2")));
        p
    }
    pub fn sweep() -> Option<SweepDef> {
        Some(SweepDef {
            adapter: "a2".into(),
            c1: DEFAULT_C1,
            c2_grid: c2_grid(),
        })
    }
    pub fn cloud_train() -> TrainConfig {
        TrainConfig::new(Stage::Base, 12, 32, 0.05)
    }
    pub fn edge_train() -> TrainConfig {
        TrainConfig::new(Stage::KdEdge, 20, 32, 0.05)
    }
    pub fn adapter_train() -> TrainConfig {
        TrainConfig::new(Stage::KdEdge, 10, 32, 0.05)
    }
    pub fn finetune() -> TrainConfig {
        TrainConfig::new(Stage::AdapterFinetune, 8, 32, 0.02)
    }
}

/// Independent seed for one named purpose, derived from the master seed.
/// Adding a purpose never shifts the seeds of existing ones.
pub fn sub_seed(master: u64, purpose: &str) -> u64 {
    let digest = Sha256::digest(purpose.as_bytes());
    let stream = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng.next_u64()
}

impl ExperimentPlan {
    /// Parses and validates a plan; errors carry the dotted field path.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<document>", describe(text, &e)))?;
        let plan: ExperimentPlan = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "<document>".to_string() } else { path };
            Error::config(field, describe(text, e.inner()))
        })?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentPlan::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::usage(format!("plan serialization: {e}")))
    }

    pub fn adapter(&self, name: &str) -> Option<&AdapterDef> {
        self.adapters.iter().find(|a| a.name == name)
    }

    /// Training configuration for `purpose` with its seed derived from the
    /// master seed and the block's own `seed` field.
    pub fn seeded(&self, cfg: &TrainConfig, stage: Stage, purpose: &str) -> TrainConfig {
        let mut c = cfg.clone();
        c.stage = stage;
        c.seed = sub_seed(self.seed, &format!("{purpose}/{}", cfg.seed));
        c
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.num_classes < 2 || d.dim == 0 || d.samples < d.num_classes {
            return Err(Error::config("data", "need num_classes >= 2, dim > 0 and samples >= num_classes"));
        }
        if !(0.0..=1.0).contains(&d.normal_fraction) {
            return Err(Error::config("data.normal_fraction", "must be in [0, 1]"));
        }
        if d.normal_class >= d.num_classes {
            return Err(Error::config("data.normal_class", "must be below num_classes"));
        }
        if !(d.difficulty >= 0.0 && d.difficulty.is_finite()) {
            return Err(Error::config("data.difficulty", "must be finite and non-negative"));
        }
        if !(d.val_fraction > 0.0 && d.val_fraction < 1.0) {
            return Err(Error::config("data.val_fraction", "must be in (0, 1)"));
        }
        for (field, def) in [("edge", &self.edge), ("cloud", &self.cloud)] {
            check_def(field, def, d.num_classes)?;
        }
        self.train.cloud.validate("train.cloud")?;
        self.train.edge.validate("train.edge")?;
        self.train.adapter.validate("train.adapter")?;
        self.train.finetune.validate("train.finetune")?;

        let mut names = BTreeSet::new();
        for (i, a) in self.adapters.iter().enumerate() {
            let field = |f: &str| format!("adapters[{i}].{f}");
            if !names.insert(a.name.as_str()) {
                return Err(Error::config(field("name"), format!("duplicate adapter `{}`", a.name)));
            }
            if !self.edge.taps.contains(&a.edge_tap) {
                return Err(Error::config(field("edge_tap"), format!("edge declares no tap {}", a.edge_tap)));
            }
            if !self.cloud.taps.contains(&a.cloud_tap) {
                return Err(Error::config(field("cloud_tap"), format!("cloud declares no tap {}", a.cloud_tap)));
            }
            if a.blocks > MAX_ADAPTER_BLOCKS {
                return Err(Error::config(field("blocks"), format!("at most {MAX_ADAPTER_BLOCKS}")));
            }
        }
        for (i, p) in self.policies.iter().enumerate() {
            let field = format!("policies[{i}]");
            p.validate(&field)?;
            if let Some(name) = p.adapter() {
                if !names.contains(name) {
                    return Err(Error::config(format!("{field}.adapter"), format!("unknown adapter `{name}`")));
                }
            }
        }
        if let Some(s) = &self.sweep {
            if !names.contains(s.adapter.as_str()) {
                return Err(Error::config("sweep.adapter", format!("unknown adapter `{}`", s.adapter)));
            }
            check_grid(s.c1, &s.c2_grid).map_err(|reason| Error::config("sweep.c2_grid", reason))?;
        }
        Ok(())
    }
}

/// One-line TOML error: the bare message plus the line it points at.
fn describe(text: &str, e: &toml::de::Error) -> String {
    let msg = e.message().trim().replace('\n', " ");
    match e.span() {
        Some(span) => {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            format!("{msg} (line {line})")
        }
        None => msg,
    }
}

/// Grid values must lie in `[0, c1]` and ascend.
pub fn check_grid(c1: f64, grid: &[f64]) -> std::result::Result<(), String> {
    if !(0.0..=1.0).contains(&c1) {
        return Err(format!("c1 = {c1} is outside [0, 1]"));
    }
    if let Some(c2) = grid.iter().find(|&&c2| !(0.0..=c1).contains(&c2)) {
        return Err(format!("c2 = {c2} is outside [0, c1 = {c1}]"));
    }
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err("values must be ascending".into());
    }
    Ok(())
}

fn check_def(field: &str, def: &ModelDef, num_classes: usize) -> Result<()> {
    let Some(last) = def.layers.last() else {
        return Err(Error::config(format!("{field}.layers"), "needs at least one layer"));
    };
    if last.kind != LayerKind::Dense || last.out_dim != Some(num_classes) {
        return Err(Error::config(
            format!("{field}.layers[{}]", def.layers.len() - 1),
            format!("last layer must be dense with out_dim = {num_classes}"),
        ));
    }
    if let Some(t) = def.taps.iter().find(|&&t| t + 1 >= def.layers.len()) {
        return Err(Error::config(
            format!("{field}.taps"),
            format!("tap {t} must name a hidden layer (0..{})", def.layers.len() - 1),
        ));
    }
    Ok(())
}
