//! Edge, cloud and adapter networks with feature taps.
//!
//! A model is a plain layer sequence. Tap `t` names the activation right
//! after `layers[t]`; the edge exports its tap-`m` feature, an adapter maps
//! it into the cloud's tap-`n` space, and the cloud finishes with the layers
//! strictly after `n`.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, softmax, Activation, Layer};
pub use crate::nn::LayerKind;
use crate::tensor::Tensor;

/// Parameter scopes used on gradient tapes.
pub const EDGE_SCOPE: u16 = 0;
pub const CLOUD_SCOPE: u16 = 1;
pub const ADAPTER_SCOPE: u16 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub layers: Vec<Layer>,
    pub num_classes: usize,
    pub normal_class: usize,
    pub taps: BTreeSet<usize>,
}

/// Structure-only description of one layer, used by model definition files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDef {
    pub kind: LayerKind,
    /// Ignored for residual blocks, which keep their input width.
    #[serde(default)]
    pub out_dim: Option<usize>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDef {
    pub name: String,
    pub layers: Vec<LayerDef>,
    pub taps: Vec<usize>,
}

impl ModelDef {
    /// Hidden dense layers of the given widths (relu) followed by a linear
    /// classifier head.
    pub fn mlp(name: &str, hidden: &[usize], num_classes: usize, taps: Vec<usize>) -> Self {
        let mut layers: Vec<LayerDef> = hidden
            .iter()
            .map(|&w| LayerDef {
                kind: LayerKind::Dense,
                out_dim: Some(w),
                activation: Activation::Relu,
            })
            .collect();
        layers.push(LayerDef {
            kind: LayerKind::Dense,
            out_dim: Some(num_classes),
            activation: Activation::Identity,
        });
        ModelDef {
            name: name.to_string(),
            layers,
            taps,
        }
    }

    /// A dense stem of width `width`, `blocks` residual blocks, and a linear
    /// head. Every hidden layer is `width` wide.
    pub fn residual(name: &str, width: usize, blocks: usize, num_classes: usize, taps: Vec<usize>) -> Self {
        let mut layers = vec![LayerDef {
            kind: LayerKind::Dense,
            out_dim: Some(width),
            activation: Activation::Relu,
        }];
        layers.extend((0..blocks).map(|_| LayerDef {
            kind: LayerKind::Residual,
            out_dim: None,
            activation: Activation::Relu,
        }));
        layers.push(LayerDef {
            kind: LayerKind::Dense,
            out_dim: Some(num_classes),
            activation: Activation::Identity,
        });
        ModelDef {
            name: name.to_string(),
            layers,
            taps,
        }
    }
}

impl ModelSpec {
    pub fn new(
        name: impl Into<String>,
        layers: Vec<Layer>,
        num_classes: usize,
        normal_class: usize,
        taps: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        let model = ModelSpec {
            name: name.into(),
            layers,
            num_classes,
            normal_class,
            taps: taps.into_iter().collect(),
        };
        model.validate()?;
        Ok(model)
    }

    /// Instantiates a definition with freshly initialized parameters.
    pub fn build<R: Rng + ?Sized>(
        def: &ModelDef,
        input_dim: usize,
        num_classes: usize,
        normal_class: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dim = input_dim;
        let mut layers = Vec::with_capacity(def.layers.len());
        for (i, l) in def.layers.iter().enumerate() {
            let layer = match l.kind {
                LayerKind::Dense => {
                    let out = l.out_dim.ok_or_else(|| {
                        Error::config(format!("{}.layers[{i}].out_dim", def.name), "required for dense layers")
                    })?;
                    if out == 0 {
                        return Err(Error::config(format!("{}.layers[{i}].out_dim", def.name), "must be positive"));
                    }
                    Layer::dense(dim, out, l.activation, rng)
                }
                LayerKind::Residual => {
                    if let Some(out) = l.out_dim {
                        if out != dim {
                            return Err(Error::config(
                                format!("{}.layers[{i}].out_dim", def.name),
                                format!("residual block must keep width {dim}"),
                            ));
                        }
                    }
                    Layer::residual(dim, l.activation, rng)
                }
            };
            dim = layer.out_dim();
            layers.push(layer);
        }
        ModelSpec::new(&def.name, layers, num_classes, normal_class, def.taps.iter().copied())
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("{}.{f}", self.name);
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::config(field("layers"), "model needs at least one layer"))?;
        nn::check_chain(&self.layers, first.in_dim())?;
        let last = self.layers.last().expect("non-empty").out_dim();
        if last != self.num_classes {
            return Err(Error::config(
                field("layers"),
                format!("final width {last} must equal num_classes {}", self.num_classes),
            ));
        }
        if self.normal_class >= self.num_classes {
            return Err(Error::config(field("normal_class"), "must be below num_classes"));
        }
        if let Some(&t) = self.taps.iter().find(|&&t| t >= self.layers.len()) {
            return Err(Error::config(
                field("taps"),
                format!("tap {t} out of range for {} layers", self.layers.len()),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    /// Width of the activation exported at `tap`.
    pub fn tap_dim(&self, tap: usize) -> Option<usize> {
        self.layers.get(tap).map(Layer::out_dim)
    }

    pub fn flops(&self) -> u64 {
        nn::flops(&self.layers)
    }

    /// FLOPS of the layers strictly after `tap`.
    pub fn tail_flops(&self, tap: usize) -> u64 {
        nn::flops(&self.layers[(tap + 1).min(self.layers.len())..])
    }

    pub fn logits(&self, input: &Tensor) -> Result<Tensor> {
        nn::forward(&self.layers, input)
    }

    pub fn probs(&self, input: &Tensor) -> Result<Tensor> {
        Ok(softmax(&self.logits(input)?))
    }

    /// Argmax class per row.
    pub fn predict(&self, input: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(input)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }

    /// SHA-256 over the parameter bits of `layers[range]`.
    pub fn param_digest(&self, range: std::ops::Range<usize>) -> [u8; 32] {
        digest_layers(&self.layers[range])
    }
}

pub(crate) fn digest_layers(layers: &[Layer]) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for layer in layers {
        for (_, t) in layer.params() {
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
    }
    h.finalize().into()
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Intermediate activation exported by a model (or produced by an adapter
/// on behalf of the cloud tap it targets).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor,
    pub producer: String,
    pub tap: usize,
}

/// Runs the whole model, returning class probabilities and the activation
/// after layer `tap`.
pub fn infer_with_tap(model: &ModelSpec, input: &Tensor, tap: usize) -> Result<(Tensor, FeatureMap)> {
    if !model.taps.contains(&tap) {
        return Err(Error::usage(format!("tap {tap} is not declared by model `{}`", model.name)));
    }
    let head = nn::forward(&model.layers[..=tap], input)?;
    let logits = nn::forward(&model.layers[tap + 1..], &head)?;
    Ok((
        softmax(&logits),
        FeatureMap {
            values: head,
            producer: model.name.clone(),
            tap,
        },
    ))
}

/// Runs only the layers after `from_tap` on an injected feature.
pub fn cloud_tail(model: &ModelSpec, injected: &FeatureMap, from_tap: usize) -> Result<Tensor> {
    Ok(softmax(&cloud_tail_logits(model, injected, from_tap)?))
}

pub fn cloud_tail_logits(model: &ModelSpec, injected: &FeatureMap, from_tap: usize) -> Result<Tensor> {
    if from_tap >= model.layers.len() {
        return Err(Error::usage(format!(
            "tap {from_tap} out of range for model `{}` with {} layers",
            model.name,
            model.layers.len()
        )));
    }
    let expected = model.layers[from_tap].out_dim();
    if injected.values.cols() != expected {
        return Err(Error::Dimension {
            layer: from_tap + 1,
            expected,
            found: injected.values.cols(),
        });
    }
    nn::forward(&model.layers[from_tap + 1..], &injected.values)
}

/// Projection from an edge tap into a cloud tap followed by `r` square
/// residual blocks.
///
/// The projection is linear; every block ends in a relu, so the output lives
/// in the same non-negative range as the cloud's hidden activations. `r = 0`
/// leaves only the projection, the single-layer hint adapter used as the
/// baseline in depth ablations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub name: String,
    pub edge_tap: usize,
    pub cloud_tap: usize,
    pub layers: Vec<Layer>,
}

pub const MAX_ADAPTER_BLOCKS: usize = 4;

impl AdapterSpec {
    pub fn new<R: Rng + ?Sized>(
        name: impl Into<String>,
        edge: &ModelSpec,
        edge_tap: usize,
        cloud: &ModelSpec,
        cloud_tap: usize,
        blocks: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let name = name.into();
        if blocks > MAX_ADAPTER_BLOCKS {
            return Err(Error::config(
                format!("adapters.{name}.blocks"),
                format!("at most {MAX_ADAPTER_BLOCKS} residual blocks"),
            ));
        }
        let in_dim = edge
            .tap_dim(edge_tap)
            .ok_or_else(|| Error::config(format!("adapters.{name}.edge_tap"), "out of range"))?;
        let out_dim = cloud
            .tap_dim(cloud_tap)
            .ok_or_else(|| Error::config(format!("adapters.{name}.cloud_tap"), "out of range"))?;
        let mut layers = vec![Layer::dense(in_dim, out_dim, Activation::Identity, rng)];
        layers.extend((0..blocks).map(|_| Layer::residual(out_dim, Activation::Relu, rng)));
        let adapter = AdapterSpec {
            name,
            edge_tap,
            cloud_tap,
            layers,
        };
        adapter.check_against(edge, cloud)?;
        Ok(adapter)
    }

    pub fn blocks(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn flops(&self) -> u64 {
        nn::flops(&self.layers)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("projection present").out_dim()
    }

    /// Checks taps and widths against the models this adapter bridges.
    pub fn check_against(&self, edge: &ModelSpec, cloud: &ModelSpec) -> Result<()> {
        let field = |f: &str| format!("adapters.{}.{f}", self.name);
        if !edge.taps.contains(&self.edge_tap) {
            return Err(Error::config(field("edge_tap"), format!("tap {} not declared by edge", self.edge_tap)));
        }
        if !cloud.taps.contains(&self.cloud_tap) {
            return Err(Error::config(field("cloud_tap"), format!("tap {} not declared by cloud", self.cloud_tap)));
        }
        if self.layers.is_empty() || self.layers[0].kind() != LayerKind::Dense {
            return Err(Error::config(field("layers"), "must start with a dense projection"));
        }
        if self.layers[1..].iter().any(|l| l.kind() != LayerKind::Residual) {
            return Err(Error::config(field("layers"), "only residual blocks may follow the projection"));
        }
        nn::check_chain(&self.layers, self.in_dim())?;
        let edge_dim = edge.tap_dim(self.edge_tap).unwrap_or(0);
        if self.in_dim() != edge_dim {
            return Err(Error::Dimension {
                layer: 0,
                expected: self.in_dim(),
                found: edge_dim,
            });
        }
        let cloud_dim = cloud.tap_dim(self.cloud_tap).unwrap_or(0);
        if self.out_dim() != cloud_dim {
            return Err(Error::config(
                field("layers"),
                format!("output width {} does not match cloud tap width {cloud_dim}", self.out_dim()),
            ));
        }
        Ok(())
    }
}

/// Maps an edge feature into the cloud tap space.
pub fn adapt(adapter: &AdapterSpec, edge_feature: &FeatureMap) -> Result<FeatureMap> {
    if edge_feature.tap != adapter.edge_tap {
        return Err(Error::usage(format!(
            "adapter `{}` expects edge tap {}, got {}",
            adapter.name, adapter.edge_tap, edge_feature.tap
        )));
    }
    if edge_feature.values.cols() != adapter.in_dim() {
        return Err(Error::Dimension {
            layer: 0,
            expected: adapter.in_dim(),
            found: edge_feature.values.cols(),
        });
    }
    let values = nn::forward(&adapter.layers, &edge_feature.values)?;
    debug_assert_eq!(values.cols(), adapter.out_dim());
    Ok(FeatureMap {
        values,
        producer: adapter.name.clone(),
        tap: adapter.cloud_tap,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfidenceMode {
    /// Probability assigned to the normal class.
    #[default]
    NormalClass,
    /// Largest class probability.
    MaxClass,
}

pub fn confidence(probs: &[f64], normal_class: usize, mode: ConfidenceMode) -> f64 {
    match mode {
        ConfidenceMode::NormalClass => probs[normal_class],
        ConfidenceMode::MaxClass => probs.iter().copied().fold(0.0, f64::max),
    }
}
