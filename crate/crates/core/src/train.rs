//! Losses and the training procedures.
//!
//! All procedures use plain minibatch SGD with a fixed learning rate. Each
//! epoch reshuffles the sample order from a ChaCha8 stream seeded with
//! `TrainConfig::seed`, so two runs with the same seed take the same steps.
//! Epoch 0 in every log is the evaluation before the first update.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::models::{
    argmax, digest_layers, AdapterSpec, FeatureMap, ModelSpec, ADAPTER_SCOPE, CLOUD_SCOPE, EDGE_SCOPE,
};
use crate::moo::{self, GradientBundle};
use crate::nn::tape::bce_logits_mean;
use crate::nn::{self, sigmoid, softmax, Layer, ParamId, Tape, PROB_EPS};
use crate::par;
use crate::tensor::Tensor;

/// Rows per chunk when evaluating a whole dataset.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    #[default]
    Base,
    KdEdge,
    AdapterFinetune,
    RecallBoost,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Base => "base",
            Stage::KdEdge => "kd-edge",
            Stage::AdapterFinetune => "adapter-finetune",
            Stage::RecallBoost => "recall-boost",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_kd_weight")]
    pub kd_weight: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub stage: Stage,
}

fn default_kd_weight() -> f64 {
    1.0
}

impl TrainConfig {
    pub fn new(stage: Stage, epochs: usize, batch_size: usize, learning_rate: f64) -> Self {
        TrainConfig {
            epochs,
            batch_size,
            learning_rate,
            kd_weight: default_kd_weight(),
            seed: 0,
            stage,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_kd_weight(mut self, kd_weight: f64) -> Self {
        self.kd_weight = kd_weight;
        self
    }

    /// Strict check used for configuration files: at least one epoch and a
    /// positive learning rate. `prefix` is the dotted path of the block.
    pub fn validate(&self, prefix: &str) -> Result<()> {
        self.check_runtime(prefix)?;
        if self.epochs == 0 {
            return Err(Error::config(format!("{prefix}.epochs"), "must be at least 1"));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::config(format!("{prefix}.learning_rate"), "must be positive"));
        }
        Ok(())
    }

    /// What the training functions themselves need. Zero epochs or a zero
    /// learning rate are accepted and leave every parameter untouched.
    fn check_runtime(&self, prefix: &str) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config(format!("{prefix}.batch_size"), "must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("{prefix}.learning_rate"), "must be finite and non-negative"));
        }
        if !(self.kd_weight >= 0.0 && self.kd_weight.is_finite()) {
            return Err(Error::config(format!("{prefix}.kd_weight"), "must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce_loss: f64,
    pub kd_loss: f64,
    pub positive_ce_loss: f64,
    /// Set when the data had no positive rows, in which case
    /// `positive_ce_loss` is 0 by definition.
    pub positive_empty: bool,
    pub accuracy: f64,
    pub recall: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.ce_loss, self.kd_loss, self.positive_ce_loss, self.accuracy, self.recall]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub report: LossReport,
    /// Mean min-norm weights over the epoch's steps (multi-objective stages).
    pub alpha: Option<Vec<f64>>,
    /// Smallest `<g_bar, g_i>` seen over the epoch (multi-objective stages).
    pub min_descent: Option<f64>,
    pub skipped_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: Stage,
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    fn new(stage: Stage) -> Self {
        TrainLog { stage, epochs: Vec::new() }
    }

    pub fn first(&self) -> &LossReport {
        &self.epochs.first().expect("epoch 0 is always logged").report
    }

    pub fn last(&self) -> &LossReport {
        &self.epochs.last().expect("epoch 0 is always logged").report
    }

    pub fn skipped_steps(&self) -> usize {
        self.epochs.iter().map(|e| e.skipped_steps).sum()
    }

    /// Columns: `epoch,ce,kd,positive_ce,acc,recall,alpha`. The alpha cell
    /// joins the weights with `;` and is empty for single-objective stages.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "ce", "kd", "positive_ce", "acc", "recall", "alpha"])?;
        for e in &self.epochs {
            let r = &e.report;
            let alpha = e
                .alpha
                .as_ref()
                .map(|a| a.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";"))
                .unwrap_or_default();
            w.write_record([
                e.epoch.to_string(),
                r.ce_loss.to_string(),
                r.kd_loss.to_string(),
                r.positive_ce_loss.to_string(),
                r.accuracy.to_string(),
                r.recall.to_string(),
                alpha,
            ])?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

fn clamped_nll(p: f64) -> f64 {
    -p.clamp(PROB_EPS, 1.0 - PROB_EPS).ln()
}

/// Mean `-ln p[label]` over the rows of `probs`.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::usage("cross-entropy of an empty batch"));
    }
    if probs.rows() != labels.len() {
        return Err(Error::usage(format!(
            "{} probability rows for {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    let total: f64 = labels.iter().enumerate().map(|(r, &y)| clamped_nll(probs.row(r)[y])).sum();
    Ok(total / labels.len() as f64)
}

/// Cross-entropy over rows whose label is not `normal_class`. Returns
/// `(loss, empty)`; with no such rows the loss is 0 and `empty` is set.
pub fn positive_cross_entropy(probs: &Tensor, labels: &[usize], normal_class: usize) -> Result<(f64, bool)> {
    if labels.is_empty() {
        return Err(Error::usage("cross-entropy of an empty batch"));
    }
    let rows: Vec<usize> = (0..labels.len()).filter(|&r| labels[r] != normal_class).collect();
    if rows.is_empty() {
        return Ok((0.0, true));
    }
    let sub: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
    Ok((cross_entropy(&probs.select_rows(&rows), &sub)?, false))
}

/// Binary cross-entropy between `σ(cloud)` as target and `σ(adapted)`.
pub fn kd_loss(cloud_feature: &FeatureMap, adapted_feature: &FeatureMap) -> Result<f64> {
    let (a, b) = (&cloud_feature.values, &adapted_feature.values);
    if a.shape() != b.shape() {
        return Err(Error::usage(format!(
            "feature shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(bce_logits_mean(&a.map(sigmoid), b))
}

/// Fraction of positive samples predicted as some positive class. Defined as
/// 1 when there are no positive samples.
pub fn recall(predictions: &[usize], labels: &[usize], normal_class: usize) -> f64 {
    let (mut pos, mut hit) = (0usize, 0usize);
    for (&p, &y) in predictions.iter().zip(labels) {
        if y != normal_class {
            pos += 1;
            hit += usize::from(p != normal_class);
        }
    }
    if pos == 0 {
        1.0
    } else {
        hit as f64 / pos as f64
    }
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    let hit = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    hit as f64 / labels.len().max(1) as f64
}

/// Runs `layers` over every row of `input` in parallel chunks.
pub(crate) fn forward_rows(layers: &[Layer], input: &Tensor) -> Result<Tensor> {
    nn::check_chain(layers, input.cols())?;
    let n = input.rows();
    let chunks = par::map_chunks(n, EVAL_CHUNK, |r| {
        let idx: Vec<usize> = r.collect();
        vec![nn::forward(layers, &input.select_rows(&idx)).expect("chain checked")]
    });
    let cols = chunks.first().map_or(0, Tensor::cols);
    let mut data = Vec::with_capacity(n * cols);
    for c in chunks {
        data.extend(c.into_data());
    }
    Ok(Tensor::matrix(n, cols, data))
}

fn report_from_probs(probs: &Tensor, data: &Dataset, kd: f64) -> Result<LossReport> {
    let preds: Vec<usize> = (0..probs.rows()).map(|r| argmax(probs.row(r))).collect();
    let (pos, empty) = positive_cross_entropy(probs, &data.labels, data.normal_class)?;
    Ok(LossReport {
        ce_loss: cross_entropy(probs, &data.labels)?,
        kd_loss: kd,
        positive_ce_loss: pos,
        positive_empty: empty,
        accuracy: accuracy(&preds, &data.labels),
        recall: recall(&preds, &data.labels, data.normal_class),
    })
}

/// Loss, accuracy and recall of `model` on `data`.
pub fn evaluate(model: &ModelSpec, data: &Dataset) -> Result<LossReport> {
    let probs = softmax(&forward_rows(&model.layers, &data.features)?);
    report_from_probs(&probs, data, 0.0)
}

/// Scores of the adaptive path (edge prefix, adapter, cloud tail) on every
/// sample of `data`, with the distillation loss against the cloud's own tap.
pub fn evaluate_adaptive(
    edge: &ModelSpec,
    cloud: &ModelSpec,
    adapter: &AdapterSpec,
    data: &Dataset,
) -> Result<LossReport> {
    adapter.check_against(edge, cloud)?;
    let feats = forward_rows(&edge.layers[..=adapter.edge_tap], &data.features)?;
    let adapted = forward_rows(&adapter.layers, &feats)?;
    let probs = softmax(&forward_rows(&cloud.layers[adapter.cloud_tap + 1..], &adapted)?);
    let target = forward_rows(&cloud.layers[..=adapter.cloud_tap], &data.features)?;
    let kd = bce_logits_mean(&target.map(sigmoid), &adapted);
    report_from_probs(&probs, data, kd)
}

fn check_data(model: &ModelSpec, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::usage("training data is empty"));
    }
    if data.dim() != model.input_dim() {
        return Err(Error::Dimension {
            layer: 0,
            expected: model.input_dim(),
            found: data.dim(),
        });
    }
    if data.num_classes != model.num_classes {
        return Err(Error::usage(format!(
            "dataset has {} classes, model `{}` has {}",
            data.num_classes, model.name, model.num_classes
        )));
    }
    Ok(())
}

fn batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn sgd(layers: &mut [Layer], scope: u16, first_index: usize, grads: &BTreeMap<ParamId, Tensor>, lr: f64) {
    if lr == 0.0 {
        return;
    }
    for (i, layer) in layers.iter_mut().enumerate() {
        for (slot, t) in layer.params_mut() {
            if let Some(g) = grads.get(&ParamId::new(scope, first_index + i, slot)) {
                for (w, d) in t.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * d;
                }
            }
        }
    }
}

/// Flattens `grads` over every parameter of `groups`, zero-filling the
/// parameters that received no gradient.
fn flatten(groups: &[(&[Layer], u16, usize)], grads: &BTreeMap<ParamId, Tensor>) -> Vec<f64> {
    let mut out = Vec::new();
    for &(layers, scope, first) in groups {
        for (i, layer) in layers.iter().enumerate() {
            for (slot, t) in layer.params() {
                match grads.get(&ParamId::new(scope, first + i, slot)) {
                    Some(g) => out.extend_from_slice(g.data()),
                    None => out.extend(std::iter::repeat_n(0.0, t.len())),
                }
            }
        }
    }
    out
}

/// Inverse of [`flatten`]: applies `w -= lr · dir` group by group.
fn step_flat(groups: &mut [(&mut [Layer], u16)], dir: &[f64], lr: f64) {
    if lr == 0.0 {
        return;
    }
    let mut k = 0;
    for (layers, _) in groups.iter_mut() {
        for layer in layers.iter_mut() {
            for (_, t) in layer.params_mut() {
                for w in t.data_mut() {
                    *w -= lr * dir[k];
                    k += 1;
                }
            }
        }
    }
    debug_assert_eq!(k, dir.len());
}

fn diverged(stage: Stage, epoch: usize, detail: impl Into<String>) -> Error {
    Error::Diverged {
        stage: stage.to_string(),
        epoch,
        detail: detail.into(),
    }
}

fn check_loss(stage: Stage, epoch: usize, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(diverged(stage, epoch, format!("batch loss is {v}")))
    }
}

fn check_report(stage: Stage, epoch: usize, r: LossReport) -> Result<LossReport> {
    if r.is_finite() {
        Ok(r)
    } else {
        Err(diverged(stage, epoch, "non-finite evaluation loss"))
    }
}

fn plain_epoch(epoch: usize, report: LossReport) -> EpochLog {
    EpochLog {
        epoch,
        report,
        alpha: None,
        min_descent: None,
        skipped_steps: 0,
    }
}

/// Supervised cross-entropy training of every layer of `model`.
pub fn train_base(model: &mut ModelSpec, data: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.check_runtime("train")?;
    check_data(model, data)?;
    let stage = Stage::Base;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::new(stage);
    log.epochs.push(plain_epoch(0, check_report(stage, 0, evaluate(model, data)?)?));
    for epoch in 1..=cfg.epochs {
        for idx in batches(data.len(), cfg.batch_size, &mut rng) {
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(data.features.select_rows(&idx));
            let logits = tape.layers(&model.layers, Some(EDGE_SCOPE), 0, x)?;
            let loss = tape.cross_entropy(logits, &labels, None);
            check_loss(stage, epoch, tape.value(loss).data()[0])?;
            let grads = tape.backward(loss, 1.0)?;
            sgd(&mut model.layers, EDGE_SCOPE, 0, grads.params(), cfg.learning_rate);
        }
        log.epochs.push(plain_epoch(epoch, check_report(stage, epoch, evaluate(model, data)?)?));
    }
    Ok(log)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KdOptions {
    /// Keep the edge fixed and train only the adapter.
    #[serde(default)]
    pub freeze_edge: bool,
    /// Combine `{CE, positive CE, λ·KD}` into one min-norm step instead of
    /// summing CE and λ·KD.
    #[serde(default)]
    pub recall_boost: bool,
}

/// Running min-norm statistics for one epoch.
#[derive(Default)]
struct MooStats {
    alpha_sum: Vec<f64>,
    steps: usize,
    skipped: usize,
    min_descent: Option<f64>,
}

impl MooStats {
    /// Min-norm direction of the bundle, or `None` (logged as skipped) when
    /// it vanishes.
    fn direction(&mut self, stage: Stage, epoch: usize, grads: Vec<Vec<f64>>) -> Result<Option<Vec<f64>>> {
        if grads.iter().flatten().any(|v| !v.is_finite()) {
            return Err(diverged(stage, epoch, "non-finite gradient"));
        }
        let bundle = GradientBundle::new(grads)?;
        let sol = moo::solve_min_norm(&bundle, moo::DEFAULT_TOL)?;
        if self.alpha_sum.is_empty() {
            self.alpha_sum = vec![0.0; bundle.len()];
        }
        for (s, a) in self.alpha_sum.iter_mut().zip(sol.weights.as_slice()) {
            *s += a;
        }
        self.steps += 1;
        if sol.combined.iter().all(|&v| v == 0.0) {
            self.skipped += 1;
            return Ok(None);
        }
        let check = moo::check_descent(&bundle, &sol.combined);
        let worst = check.inner_products.iter().copied().fold(f64::INFINITY, f64::min);
        self.min_descent = Some(self.min_descent.map_or(worst, |m| m.min(worst)));
        Ok(Some(sol.combined))
    }

    fn finish(self, e: &mut EpochLog) {
        if self.steps > 0 {
            e.alpha = Some(self.alpha_sum.iter().map(|s| s / self.steps as f64).collect());
        }
        e.min_descent = self.min_descent;
        e.skipped_steps = self.skipped;
    }
}

fn positive_rows(labels: &[usize], normal_class: usize) -> Vec<usize> {
    (0..labels.len()).filter(|&r| labels[r] != normal_class).collect()
}

/// Edge training with feature distillation through `adapter`.
///
/// The loss per batch is `CE(edge) + λ·KD(σ(cloud tap), σ(adapter(edge tap)))`.
/// Edge layers up to the exported tap see both terms, later edge layers only
/// CE, and the adapter only KD. The cloud is read-only. With `λ = 0` the
/// adapter branch is not recorded and the edge follows exactly the steps of
/// [`train_base`].
///
/// With `opts.recall_boost` the three objectives CE, positive-sample CE and
/// `λ·KD` are combined per step by the min-norm weights instead.
pub fn train_edge_kd(
    edge: &mut ModelSpec,
    cloud: &ModelSpec,
    adapter: &mut AdapterSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    opts: KdOptions,
) -> Result<TrainLog> {
    cfg.check_runtime("train")?;
    check_data(edge, data)?;
    check_data(cloud, data)?;
    adapter.check_against(edge, cloud)?;
    let stage = if opts.recall_boost { Stage::RecallBoost } else { Stage::KdEdge };
    if opts.recall_boost && data.positive_count() == 0 {
        return Err(Error::usage("recall boosting needs at least one positive sample"));
    }
    let use_kd = cfg.kd_weight > 0.0;
    let m = adapter.edge_tap;
    let edge_scope = (!opts.freeze_edge).then_some(EDGE_SCOPE);

    // the cloud is frozen, so its tap activations are fixed targets
    let targets = forward_rows(&cloud.layers[..=adapter.cloud_tap], &data.features)?;
    let edge_digest = digest_layers(&edge.layers);

    let eval = |edge: &ModelSpec, adapter: &AdapterSpec, epoch: usize| -> Result<LossReport> {
        let mut r = evaluate(edge, data)?;
        r.kd_loss = evaluate_adaptive(edge, cloud, adapter, data)?.kd_loss;
        check_report(stage, epoch, r)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::new(stage);
    log.epochs.push(plain_epoch(0, eval(edge, adapter, 0)?));

    for epoch in 1..=cfg.epochs {
        let mut stats = MooStats::default();
        for idx in batches(data.len(), cfg.batch_size, &mut rng) {
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(data.features.select_rows(&idx));
            let h = tape.layers(&edge.layers[..=m], edge_scope, 0, x)?;
            let logits = tape.layers(&edge.layers[m + 1..], edge_scope, m + 1, h)?;
            let ce = tape.cross_entropy(logits, &labels, None);
            let kd = if use_kd {
                let a = tape.layers(&adapter.layers, Some(ADAPTER_SCOPE), 0, h)?;
                Some(tape.sigmoid_bce(&targets.select_rows(&idx), a))
            } else {
                None
            };

            if opts.recall_boost {
                let pos = tape.cross_entropy(logits, &labels, Some(&positive_rows(&labels, edge.normal_class)));
                let mut objectives = vec![(ce, 1.0), (pos, 1.0)];
                objectives.extend(kd.map(|v| (v, cfg.kd_weight)));
                let groups = [(&edge.layers[..], EDGE_SCOPE, 0), (&adapter.layers[..], ADAPTER_SCOPE, 0)];
                let mut flat = Vec::with_capacity(objectives.len());
                for &(o, w) in &objectives {
                    check_loss(stage, epoch, tape.value(o).data()[0])?;
                    flat.push(flatten(&groups, tape.backward(o, w)?.params()));
                }
                if let Some(dir) = stats.direction(stage, epoch, flat)? {
                    let mut groups = [(&mut edge.layers[..], EDGE_SCOPE), (&mut adapter.layers[..], ADAPTER_SCOPE)];
                    step_flat(&mut groups, &dir, cfg.learning_rate);
                }
                continue;
            }

            let loss = match kd {
                Some(kd) => {
                    let scaled = tape.scale(kd, cfg.kd_weight);
                    tape.add(ce, scaled)
                }
                None => ce,
            };
            check_loss(stage, epoch, tape.value(loss).data()[0])?;
            let grads = tape.backward(loss, 1.0)?;
            if !opts.freeze_edge {
                sgd(&mut edge.layers, EDGE_SCOPE, 0, grads.params(), cfg.learning_rate);
            }
            sgd(&mut adapter.layers, ADAPTER_SCOPE, 0, grads.params(), cfg.learning_rate);
        }
        let mut e = plain_epoch(epoch, eval(edge, adapter, epoch)?);
        if opts.recall_boost {
            stats.finish(&mut e);
        }
        log.epochs.push(e);
    }
    if opts.freeze_edge && digest_layers(&edge.layers) != edge_digest {
        return Err(Error::FrozenMutated(format!("edge `{}`", edge.name)));
    }
    Ok(log)
}

/// Two-objective edge training: every step follows the min-norm combination
/// of the cross-entropy gradient and the positive-sample cross-entropy
/// gradient. Batches where that combination vanishes are skipped.
pub fn train_recall_boost(edge: &mut ModelSpec, data: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.check_runtime("train")?;
    check_data(edge, data)?;
    if data.positive_count() == 0 {
        return Err(Error::usage("recall boosting needs at least one positive sample"));
    }
    let stage = Stage::RecallBoost;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::new(stage);
    log.epochs.push(plain_epoch(0, check_report(stage, 0, evaluate(edge, data)?)?));
    for epoch in 1..=cfg.epochs {
        let mut stats = MooStats::default();
        for idx in batches(data.len(), cfg.batch_size, &mut rng) {
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(data.features.select_rows(&idx));
            let logits = tape.layers(&edge.layers, Some(EDGE_SCOPE), 0, x)?;
            let ce = tape.cross_entropy(logits, &labels, None);
            let pos = tape.cross_entropy(logits, &labels, Some(&positive_rows(&labels, edge.normal_class)));
            let groups = [(&edge.layers[..], EDGE_SCOPE, 0)];
            let mut flat = Vec::with_capacity(2);
            for o in [ce, pos] {
                check_loss(stage, epoch, tape.value(o).data()[0])?;
                flat.push(flatten(&groups, tape.backward(o, 1.0)?.params()));
            }
            if let Some(dir) = stats.direction(stage, epoch, flat)? {
                step_flat(&mut [(&mut edge.layers[..], EDGE_SCOPE)], &dir, cfg.learning_rate);
            }
        }
        let mut e = plain_epoch(epoch, check_report(stage, epoch, evaluate(edge, data)?)?);
        stats.finish(&mut e);
        log.epochs.push(e);
    }
    Ok(log)
}

/// Trains the adapter together with the cloud layers after its target tap,
/// on the cross-entropy of the adaptive path. The edge and the cloud layers
/// up to the tap stay fixed.
pub fn finetune_adapter(
    edge: &ModelSpec,
    cloud: &mut ModelSpec,
    adapter: &mut AdapterSpec,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.check_runtime("train")?;
    check_data(edge, data)?;
    check_data(cloud, data)?;
    adapter.check_against(edge, cloud)?;
    let stage = Stage::AdapterFinetune;
    let n = adapter.cloud_tap;
    let frozen = cloud.param_digest(0..n + 1);
    let feats = forward_rows(&edge.layers[..=adapter.edge_tap], &data.features)?;

    let eval = |cloud: &ModelSpec, adapter: &AdapterSpec, epoch: usize| {
        check_report(stage, epoch, evaluate_adaptive(edge, cloud, adapter, data)?)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::new(stage);
    log.epochs.push(plain_epoch(0, eval(cloud, adapter, 0)?));
    for epoch in 1..=cfg.epochs {
        for idx in batches(data.len(), cfg.batch_size, &mut rng) {
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let mut tape = Tape::new();
            let f = tape.constant(feats.select_rows(&idx));
            let a = tape.layers(&adapter.layers, Some(ADAPTER_SCOPE), 0, f)?;
            let logits = tape.layers(&cloud.layers[n + 1..], Some(CLOUD_SCOPE), n + 1, a)?;
            let loss = tape.cross_entropy(logits, &labels, None);
            check_loss(stage, epoch, tape.value(loss).data()[0])?;
            let grads = tape.backward(loss, 1.0)?;
            sgd(&mut adapter.layers, ADAPTER_SCOPE, 0, grads.params(), cfg.learning_rate);
            sgd(&mut cloud.layers[n + 1..], CLOUD_SCOPE, n + 1, grads.params(), cfg.learning_rate);
        }
        log.epochs.push(plain_epoch(epoch, eval(cloud, adapter, epoch)?));
    }
    if cloud.param_digest(0..n + 1) != frozen {
        return Err(Error::FrozenMutated(format!("cloud `{}` layers up to tap {n}", cloud.name)));
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::gen_dataset;
    use crate::models::ModelDef;
    use approx::assert_relative_eq;

    fn blobs(n: usize, seed: u64) -> Dataset {
        // two classes, well separated along every axis
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand_distr::{Distribution, Normal};
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let m = if c == 0 { -1.0 } else { 1.0 };
            x.extend((0..4).map(|_| m + noise.sample(&mut rng)));
            y.push(c);
        }
        Dataset::new(Tensor::matrix(n, 4, x), y, vec![0; n], 2, 0).unwrap()
    }

    fn mlp(input: usize, hidden: usize, classes: usize, seed: u64) -> ModelSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelSpec::build(&ModelDef::mlp("net", &[hidden], classes, vec![0]), input, classes, 0, &mut rng).unwrap()
    }

    fn small_setup(seed: u64) -> (Dataset, ModelSpec, ModelSpec, AdapterSpec) {
        let data = gen_dataset(7, 16, 600, 0.4, seed, 0.6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let edge = ModelSpec::build(&ModelDef::mlp("edge", &[8], 7, vec![0]), 16, 7, 0, &mut rng).unwrap();
        let cloud = ModelSpec::build(&ModelDef::residual("cloud", 16, 2, 7, vec![1, 2]), 16, 7, 0, &mut rng).unwrap();
        let adapter = AdapterSpec::new("a", &edge, 0, &cloud, 2, 1, &mut rng).unwrap();
        (data, edge, cloud, adapter)
    }

    #[test]
    fn ce_examples() {
        let eps = PROB_EPS;
        let p = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert!(cross_entropy(&p, &[0, 1]).unwrap() <= -(1.0 - eps).ln() + 1e-15);
        let u = Tensor::matrix(1, 7, vec![1.0 / 7.0; 7]);
        assert_relative_eq!(cross_entropy(&u, &[3]).unwrap(), 7f64.ln(), epsilon = 1e-12);
        let b = Tensor::matrix(2, 2, vec![0.5, 0.5, 0.25, 0.75]);
        let want = (2f64.ln() + (4.0f64 / 3.0).ln()) / 2.0;
        assert_relative_eq!(cross_entropy(&b, &[0, 1]).unwrap(), want, epsilon = 1e-12);
        assert!(cross_entropy(&Tensor::matrix(1, 2, vec![0.5, 0.5]), &[]).is_err());
    }

    #[test]
    fn positive_ce_examples() {
        let p = Tensor::matrix(3, 3, vec![0.7, 0.2, 0.1, 0.1, 0.6, 0.3, 0.2, 0.2, 0.6]);
        assert_eq!(positive_cross_entropy(&p, &[0, 0, 0], 0).unwrap(), (0.0, true));
        let all = positive_cross_entropy(&p, &[1, 1, 2], 0).unwrap();
        assert_eq!(all, (cross_entropy(&p, &[1, 1, 2]).unwrap(), false));
        let mixed = positive_cross_entropy(&p, &[0, 1, 2], 0).unwrap().0;
        let sub = cross_entropy(&p.select_rows(&[1, 2]), &[1, 2]).unwrap();
        assert_eq!(mixed, sub);
    }

    fn fm(values: Tensor) -> FeatureMap {
        FeatureMap {
            values,
            producer: "t".into(),
            tap: 0,
        }
    }

    #[test]
    fn kd_examples() {
        let z = fm(Tensor::zeros(vec![2, 3]));
        assert_relative_eq!(kd_loss(&z, &z).unwrap(), 2f64.ln(), epsilon = 1e-12);
        let big = fm(Tensor::matrix(1, 2, vec![40.0, 40.0]));
        // the clamp floors the loss at -ln(1-ε)
        assert!(kd_loss(&big, &big).unwrap() <= -(-PROB_EPS).ln_1p() + 1e-15);
        let a = Tensor::matrix(2, 3, vec![0.3, -1.2, 2.0, 0.0, 0.7, -0.4]);
        let b = Tensor::matrix(2, 3, vec![-0.5, 0.1, 1.5, 2.2, -0.3, 0.9]);
        let mut want = 0.0;
        for k in 0..6 {
            let p = 1.0 / (1.0 + (-a.data()[k]).exp());
            let q = 1.0 / (1.0 + (-b.data()[k]).exp());
            want += -(p * q.ln() + (1.0 - p) * (1.0 - q).ln());
        }
        assert_relative_eq!(kd_loss(&fm(a.clone()), &fm(b)).unwrap(), want / 6.0, epsilon = 1e-12);
        assert!(kd_loss(&fm(a), &z.clone()).is_ok());
        assert!(kd_loss(&fm(Tensor::zeros(vec![1, 3])), &z).is_err());
    }

    #[test]
    fn base_learns_blobs() {
        let data = blobs(400, 1);
        let mut net = mlp(4, 6, 2, 2);
        let cfg = TrainConfig::new(Stage::Base, 50, 32, 0.1).with_seed(3);
        let log = train_base(&mut net, &data, &cfg).unwrap();
        assert!(log.last().accuracy >= 0.99, "{:?}", log.last());
        assert!(log.last().ce_loss <= log.first().ce_loss);
        assert_eq!(log.epochs.len(), 51);
    }

    #[test]
    fn zero_rate_changes_nothing() {
        let data = blobs(100, 1);
        let mut net = mlp(4, 6, 2, 2);
        let before = net.clone();
        train_base(&mut net, &data, &TrainConfig::new(Stage::Base, 3, 16, 0.0)).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn base_is_deterministic() {
        let data = blobs(200, 4);
        let cfg = TrainConfig::new(Stage::Base, 5, 16, 0.05).with_seed(11);
        let mut a = mlp(4, 6, 2, 2);
        let mut b = mlp(4, 6, 2, 2);
        train_base(&mut a, &data, &cfg).unwrap();
        train_base(&mut b, &data, &cfg).unwrap();
        let sa = crate::nn::checkpoint::to_string("model", &a).unwrap();
        let sb = crate::nn::checkpoint::to_string("model", &b).unwrap();
        assert_eq!(sa, sb);
    }

    #[test]
    fn divergence_names_stage() {
        let data = blobs(100, 1);
        let mut net = mlp(4, 6, 2, 2);
        let err = train_base(&mut net, &data, &TrainConfig::new(Stage::Base, 20, 10, 1e200)).unwrap_err();
        match err {
            Error::Diverged { stage, .. } => assert_eq!(stage, "base"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn zero_kd_weight_matches_base() {
        let (data, edge, cloud, adapter) = small_setup(5);
        let cfg = TrainConfig::new(Stage::KdEdge, 3, 32, 0.05).with_seed(9).with_kd_weight(0.0);
        let mut plain = edge.clone();
        train_base(&mut plain, &data, &cfg).unwrap();
        let mut kd = edge.clone();
        let mut ad = adapter.clone();
        train_edge_kd(&mut kd, &cloud, &mut ad, &data, &cfg, KdOptions::default()).unwrap();
        assert_eq!(kd, plain);
        assert_eq!(ad, adapter);
    }

    #[test]
    fn kd_gradient_routing() {
        let (data, edge, cloud, adapter) = small_setup(6);
        let cloud_before = cloud.clone();
        let cfg = TrainConfig::new(Stage::KdEdge, 2, 32, 0.05).with_seed(1);

        let mut e = edge.clone();
        let mut a = adapter.clone();
        train_edge_kd(&mut e, &cloud, &mut a, &data, &cfg, KdOptions::default()).unwrap();
        assert_ne!(e.layers, edge.layers);
        assert_ne!(a.layers, adapter.layers);
        assert_eq!(cloud, cloud_before);

        let mut e = edge.clone();
        let mut a = adapter.clone();
        let opts = KdOptions {
            freeze_edge: true,
            ..KdOptions::default()
        };
        train_edge_kd(&mut e, &cloud, &mut a, &data, &cfg, opts).unwrap();
        assert_eq!(e, edge);
        assert_ne!(a.layers, adapter.layers);
    }

    #[test]
    fn kd_head_sees_only_ce() {
        // one step: the edge head gradient must equal the CE-only gradient
        let (data, edge, cloud, adapter) = small_setup(7);
        let idx: Vec<usize> = (0..32).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let target = forward_rows(&cloud.layers[..=adapter.cloud_tap], &data.features.select_rows(&idx)).unwrap();
        let run = |with_kd: bool| {
            let mut tape = Tape::new();
            let x = tape.constant(data.features.select_rows(&idx));
            let h = tape.layers(&edge.layers[..1], Some(EDGE_SCOPE), 0, x).unwrap();
            let logits = tape.layers(&edge.layers[1..], Some(EDGE_SCOPE), 1, h).unwrap();
            let mut loss = tape.cross_entropy(logits, &labels, None);
            if with_kd {
                let a = tape.layers(&adapter.layers, Some(ADAPTER_SCOPE), 0, h).unwrap();
                let kd = tape.sigmoid_bce(&target, a);
                loss = tape.add(loss, kd);
            }
            tape.backward(loss, 1.0).unwrap().into_params()
        };
        let (ce, both) = (run(false), run(true));
        for (id, g) in &both {
            match (id.scope, id.layer) {
                (EDGE_SCOPE, 1) => assert_eq!(g, &ce[id]),
                (EDGE_SCOPE, 0) => assert_ne!(g, &ce[id]),
                (ADAPTER_SCOPE, _) => assert!(!ce.contains_key(id)),
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn finetune_freeze_contract() {
        let (data, edge, mut cloud, mut adapter) = small_setup(8);
        let before = cloud.clone();
        let zero = TrainConfig::new(Stage::AdapterFinetune, 0, 32, 0.05);
        let a0 = adapter.clone();
        finetune_adapter(&edge, &mut cloud, &mut adapter, &data, &zero).unwrap();
        assert_eq!((cloud.clone(), adapter.clone()), (before.clone(), a0.clone()));

        let cfg = TrainConfig::new(Stage::AdapterFinetune, 10, 32, 0.05).with_seed(2);
        let log = finetune_adapter(&edge, &mut cloud, &mut adapter, &data, &cfg).unwrap();
        let n = adapter.cloud_tap;
        assert_eq!(cloud.param_digest(0..n + 1), before.param_digest(0..n + 1));
        assert_ne!(cloud.layers[n + 1..], before.layers[n + 1..]);
        assert_ne!(adapter, a0);
        assert!(log.last().ce_loss < log.first().ce_loss);
    }

    #[test]
    fn recall_boost_rejects_no_positives() {
        let mut data = blobs(50, 1);
        data.labels.iter_mut().for_each(|l| *l = 0);
        let mut net = mlp(4, 4, 2, 1);
        let cfg = TrainConfig::new(Stage::RecallBoost, 1, 10, 0.1);
        assert!(matches!(train_recall_boost(&mut net, &data, &cfg), Err(Error::Usage(_))));
    }

    #[test]
    fn recall_boost_all_positive_follows_ce() {
        // normal class 0 never appears, so both objectives coincide
        let mut data = blobs(60, 2);
        data.labels.iter_mut().for_each(|l| *l = 1);
        data.num_classes = 3;
        let mut boosted = mlp(4, 4, 3, 1);
        let mut plain = boosted.clone();
        let cfg = TrainConfig::new(Stage::RecallBoost, 2, 20, 0.1).with_seed(4);
        let log = train_recall_boost(&mut boosted, &data, &cfg).unwrap();
        train_base(&mut plain, &data, &cfg).unwrap();
        for (lb, lp) in boosted.layers.iter().zip(&plain.layers) {
            for ((_, b), (_, p)) in lb.params().iter().zip(lp.params()) {
                for (x, y) in b.data().iter().zip(p.data()) {
                    assert_relative_eq!(x, y, epsilon = 1e-12);
                }
            }
        }
        assert_eq!(log.epochs[1].alpha.as_deref(), Some(&[0.5, 0.5][..]));
    }

    #[test]
    fn recall_boost_steps_descend() {
        let (data, mut edge, _, _) = small_setup(9);
        let cfg = TrainConfig::new(Stage::RecallBoost, 3, 32, 0.05).with_seed(3);
        let log = train_recall_boost(&mut edge, &data, &cfg).unwrap();
        for e in &log.epochs[1..] {
            assert!(e.min_descent.unwrap() >= -1e-9);
            let a = e.alpha.as_ref().unwrap();
            assert_relative_eq!(a.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn combined_bundle_uses_three_objectives() {
        let (data, mut edge, cloud, mut adapter) = small_setup(10);
        let cfg = TrainConfig::new(Stage::RecallBoost, 2, 32, 0.05).with_seed(3);
        let opts = KdOptions {
            recall_boost: true,
            ..KdOptions::default()
        };
        let log = train_edge_kd(&mut edge, &cloud, &mut adapter, &data, &cfg, opts).unwrap();
        for e in &log.epochs[1..] {
            assert_eq!(e.alpha.as_ref().unwrap().len(), 3);
            assert!(e.min_descent.unwrap() >= -1e-9);
        }
    }

    #[test]
    fn log_csv_header() {
        let data = blobs(40, 1);
        let mut net = mlp(4, 4, 2, 1);
        let log = train_base(&mut net, &data, &TrainConfig::new(Stage::Base, 1, 10, 0.1)).unwrap();
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,ce,kd,positive_ce,acc,recall,alpha\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
