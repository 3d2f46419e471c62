//! Routing rules deciding where each sample finishes inference.
//!
//! Every rule starts with the edge model. Its confidence `C` is compared
//! with the thresholds: `C ≥ c1` ends on the edge. Below that, Independent
//! ships the raw input to the full cloud model, Adaptive ships the edge tap
//! feature to the adapter and cloud tail, and Dynamic picks the adaptive
//! path for `C ≥ c2` and the full cloud otherwise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{argmax, confidence, AdapterSpec, ConfidenceMode, ModelSpec};
use crate::nn::{self, softmax};
use crate::par;
use crate::tensor::Tensor;

pub const DEFAULT_BYTES_PER_ELEMENT: u64 = 4;

/// Rows per work item in [`route_batch`].
const ROUTE_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Route {
    EdgeOnly,
    Adaptive,
    FullCloud,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Variant {
    Independent { c1: f64 },
    Adaptive { c1: f64, adapter: String },
    Dynamic { c1: f64, c2: f64, adapter: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EccPolicy {
    #[serde(flatten)]
    pub variant: Variant,
    #[serde(default)]
    pub confidence_mode: ConfidenceMode,
    #[serde(default = "default_bpe")]
    pub bytes_per_element: u64,
}

fn default_bpe() -> u64 {
    DEFAULT_BYTES_PER_ELEMENT
}

impl EccPolicy {
    pub fn independent(c1: f64) -> Self {
        EccPolicy::from_variant(Variant::Independent { c1 })
    }

    pub fn adaptive(c1: f64, adapter: impl Into<String>) -> Self {
        EccPolicy::from_variant(Variant::Adaptive {
            c1,
            adapter: adapter.into(),
        })
    }

    pub fn dynamic(c1: f64, c2: f64, adapter: impl Into<String>) -> Self {
        EccPolicy::from_variant(Variant::Dynamic {
            c1,
            c2,
            adapter: adapter.into(),
        })
    }

    fn from_variant(variant: Variant) -> Self {
        EccPolicy {
            variant,
            confidence_mode: ConfidenceMode::default(),
            bytes_per_element: DEFAULT_BYTES_PER_ELEMENT,
        }
    }

    pub fn c1(&self) -> f64 {
        match self.variant {
            Variant::Independent { c1 } | Variant::Adaptive { c1, .. } | Variant::Dynamic { c1, .. } => c1,
        }
    }

    pub fn adapter(&self) -> Option<&str> {
        match &self.variant {
            Variant::Independent { .. } => None,
            Variant::Adaptive { adapter, .. } | Variant::Dynamic { adapter, .. } => Some(adapter),
        }
    }

    /// Short label such as `ECC_D(c1=0.8,c2=0.3,a2)`.
    pub fn label(&self) -> String {
        match &self.variant {
            Variant::Independent { c1 } => format!("ECC_I(c1={c1})"),
            Variant::Adaptive { c1, adapter } => format!("ECC_A(c1={c1},{adapter})"),
            Variant::Dynamic { c1, c2, adapter } => format!("ECC_D(c1={c1},c2={c2},{adapter})"),
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        let c1 = self.c1();
        if !(0.0..=1.0).contains(&c1) {
            return Err(Error::config(format!("{field}.c1"), format!("{c1} is outside [0, 1]")));
        }
        if let Variant::Dynamic { c2, .. } = self.variant {
            if !(0.0..=c1).contains(&c2) {
                return Err(Error::config(format!("{field}.c2"), format!("{c2} is outside [0, c1 = {c1}]")));
            }
        }
        if self.bytes_per_element == 0 {
            return Err(Error::config(format!("{field}.bytes_per_element"), "must be positive"));
        }
        Ok(())
    }

    /// The branch taken for an edge confidence `c`.
    pub fn decide(&self, c: f64) -> Route {
        match self.variant {
            Variant::Independent { c1 } if c < c1 => Route::FullCloud,
            Variant::Adaptive { c1, .. } if c < c1 => Route::Adaptive,
            Variant::Dynamic { c1, c2, .. } if c < c1 => {
                if c >= c2 {
                    Route::Adaptive
                } else {
                    Route::FullCloud
                }
            }
            _ => Route::EdgeOnly,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteRecord {
    pub route: Route,
    pub confidence: f64,
    pub bytes_sent: u64,
    pub flops_edge: u64,
    pub flops_cloud_side: u64,
    pub prediction: usize,
}

/// An adapter together with the cloud whose tail finishes the adaptive path.
/// After fine-tuning this is a copy of the cloud with a retrained tail.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptivePath {
    pub adapter: AdapterSpec,
    pub cloud: ModelSpec,
}

impl AdaptivePath {
    pub fn new(adapter: AdapterSpec, cloud: ModelSpec) -> Self {
        AdaptivePath { adapter, cloud }
    }

    pub fn flops(&self) -> u64 {
        self.adapter.flops() + self.cloud.tail_flops(self.adapter.cloud_tap)
    }
}

/// The trained networks a policy is evaluated against.
#[derive(Clone, Copy, Debug)]
pub struct EccSystem<'a> {
    pub edge: &'a ModelSpec,
    pub cloud: &'a ModelSpec,
    pub path: Option<&'a AdaptivePath>,
}

impl<'a> EccSystem<'a> {
    pub fn new(edge: &'a ModelSpec, cloud: &'a ModelSpec, path: Option<&'a AdaptivePath>) -> Result<Self> {
        if edge.input_dim() != cloud.input_dim() || edge.num_classes != cloud.num_classes {
            return Err(Error::usage("edge and cloud disagree on input width or class count"));
        }
        if let Some(p) = path {
            p.adapter.check_against(edge, &p.cloud)?;
        }
        Ok(EccSystem { edge, cloud, path })
    }

    fn path_for(&self, policy: &EccPolicy) -> Result<Option<&'a AdaptivePath>> {
        match policy.adapter() {
            None => Ok(None),
            Some(name) => match self.path {
                Some(p) if p.adapter.name == name => Ok(Some(p)),
                Some(p) => Err(Error::usage(format!(
                    "policy wants adapter `{name}` but the system carries `{}`",
                    p.adapter.name
                ))),
                None => Err(Error::usage(format!("policy wants adapter `{name}` but none is bound"))),
            },
        }
    }
}

/// Routes every row of `inputs` (rows are independent samples).
pub fn route_batch(sys: &EccSystem<'_>, policy: &EccPolicy, inputs: &Tensor) -> Result<Vec<RouteRecord>> {
    policy.validate("policy")?;
    nn::check_chain(&sys.edge.layers, inputs.cols())?;
    let path = sys.path_for(policy)?;
    let n = inputs.rows();
    let chunks = par::map_chunks(n, ROUTE_CHUNK, |r| {
        let idx: Vec<usize> = r.collect();
        vec![route_rows(sys, path, policy, &inputs.select_rows(&idx))]
    });
    let mut out = Vec::with_capacity(n);
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

fn route_rows(
    sys: &EccSystem<'_>,
    path: Option<&AdaptivePath>,
    policy: &EccPolicy,
    x: &Tensor,
) -> Result<Vec<RouteRecord>> {
    let edge = sys.edge;
    let split = path.map_or(edge.layers.len() - 1, |p| p.adapter.edge_tap);
    let h = nn::forward(&edge.layers[..=split], x)?;
    let probs = softmax(&nn::forward(&edge.layers[split + 1..], &h)?);
    let edge_flops = edge.flops();
    let input_bytes = x.cols() as u64 * policy.bytes_per_element;

    let mut records: Vec<RouteRecord> = (0..x.rows())
        .map(|r| {
            let p = probs.row(r);
            let c = confidence(p, edge.normal_class, policy.confidence_mode);
            RouteRecord {
                route: policy.decide(c),
                confidence: c,
                bytes_sent: 0,
                flops_edge: edge_flops,
                flops_cloud_side: 0,
                prediction: argmax(p),
            }
        })
        .collect();

    let rows_on = |route: Route| -> Vec<usize> { (0..records.len()).filter(|&r| records[r].route == route).collect() };
    let adaptive = rows_on(Route::Adaptive);
    let full = rows_on(Route::FullCloud);

    if !adaptive.is_empty() {
        let p = path.expect("adaptive route implies a bound path");
        let feats = h.select_rows(&adaptive);
        let adapted = nn::forward(&p.adapter.layers, &feats)?;
        let logits = nn::forward(&p.cloud.layers[p.adapter.cloud_tap + 1..], &adapted)?;
        let bytes = feats.cols() as u64 * policy.bytes_per_element;
        for (k, &r) in adaptive.iter().enumerate() {
            let rec = &mut records[r];
            rec.bytes_sent = bytes;
            rec.flops_cloud_side = p.flops();
            rec.prediction = argmax(logits.row(k));
        }
    }
    if !full.is_empty() {
        let logits = nn::forward(&sys.cloud.layers, &x.select_rows(&full))?;
        for (k, &r) in full.iter().enumerate() {
            let rec = &mut records[r];
            rec.bytes_sent = input_bytes;
            rec.flops_cloud_side = sys.cloud.flops();
            rec.prediction = argmax(logits.row(k));
        }
    }
    Ok(records)
}

fn route_one(sys: &EccSystem<'_>, policy: &EccPolicy, input: &Tensor) -> Result<RouteRecord> {
    let row = input.as_matrix();
    if row.rows() != 1 {
        return Err(Error::usage("expected a single sample"));
    }
    Ok(route_batch(sys, policy, &row)?[0])
}

fn expect_variant(policy: &EccPolicy, want: &str, ok: bool) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::usage(format!("{} is not an {want} policy", policy.label())))
    }
}

pub fn route_independent(edge: &ModelSpec, cloud: &ModelSpec, policy: &EccPolicy, input: &Tensor) -> Result<RouteRecord> {
    expect_variant(policy, "independent", matches!(policy.variant, Variant::Independent { .. }))?;
    route_one(&EccSystem::new(edge, cloud, None)?, policy, input)
}

pub fn route_adaptive(
    edge: &ModelSpec,
    cloud: &ModelSpec,
    path: &AdaptivePath,
    policy: &EccPolicy,
    input: &Tensor,
) -> Result<RouteRecord> {
    expect_variant(policy, "adaptive", matches!(policy.variant, Variant::Adaptive { .. }))?;
    route_one(&EccSystem::new(edge, cloud, Some(path))?, policy, input)
}

pub fn route_dynamic(
    edge: &ModelSpec,
    cloud: &ModelSpec,
    path: &AdaptivePath,
    policy: &EccPolicy,
    input: &Tensor,
) -> Result<RouteRecord> {
    expect_variant(policy, "dynamic", matches!(policy.variant, Variant::Dynamic { .. }))?;
    route_one(&EccSystem::new(edge, cloud, Some(path))?, policy, input)
}

/// Which model answers every sample in a single-model baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    Edge,
    Cloud,
}

/// Records for running only the edge, or only the cloud on the raw input.
/// The cloud baseline does not pay for an edge pass.
pub fn baseline_records(
    sys: &EccSystem<'_>,
    which: Baseline,
    inputs: &Tensor,
    bytes_per_element: u64,
) -> Result<Vec<RouteRecord>> {
    let model = match which {
        Baseline::Edge => sys.edge,
        Baseline::Cloud => sys.cloud,
    };
    nn::check_chain(&model.layers, inputs.cols())?;
    let flops = model.flops();
    let bytes = inputs.cols() as u64 * bytes_per_element;
    Ok(par::map_chunks(inputs.rows(), ROUTE_CHUNK, |r| {
        let idx: Vec<usize> = r.collect();
        let probs = softmax(&nn::forward(&model.layers, &inputs.select_rows(&idx)).expect("chain checked"));
        (0..idx.len())
            .map(|k| {
                let p = probs.row(k);
                let (route, bytes_sent, fe, fc) = match which {
                    Baseline::Edge => (Route::EdgeOnly, 0, flops, 0),
                    Baseline::Cloud => (Route::FullCloud, bytes, 0, flops),
                };
                RouteRecord {
                    route,
                    confidence: confidence(p, model.normal_class, ConfidenceMode::NormalClass),
                    bytes_sent,
                    flops_edge: fe,
                    flops_cloud_side: fc,
                    prediction: argmax(p),
                }
            })
            .collect()
    }))
}
