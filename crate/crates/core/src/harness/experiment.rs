//! End-to-end runs: data, staged training, policy evaluation, sweeps, and
//! the files they leave behind.
//!
//! Output files in a run directory:
//!
//! | file | contents |
//! |------|----------|
//! | `system.json` | trained edge, cloud and adaptive paths |
//! | `train_*.csv`, `finetune_*.csv` | per-epoch training logs |
//! | `reports.csv` | one row per baseline and policy |
//! | `frontier_comp.csv`, `frontier_comm.csv` | non-dominated rows of `reports.csv` |
//! | `sweep.csv` | dynamic-threshold sweep with branch counts |
//! | `sweep_frontier_comp.csv`, `sweep_frontier_comm.csv` | non-dominated sweep rows |

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{gen_from_config, DataConfig, Dataset, SplitData};
use super::plan::{check_grid, sub_seed, AdapterDef, ExperimentPlan, RecallBoost};
use crate::error::{Error, Result};
use crate::metrics::{frontier_rows, write_rows, Anchors, CostReport, ReportRow};
use crate::models::{AdapterSpec, ModelSpec};
use crate::nn::checkpoint;
use crate::par;
use crate::policy::{baseline_records, route_batch, AdaptivePath, Baseline, EccPolicy, EccSystem, Route, RouteRecord};
use crate::train::{finetune_adapter, train_base, train_edge_kd, train_recall_boost, KdOptions, Stage, TrainLog};

pub const SYSTEM_FILE: &str = "system.json";
pub const REPORTS_FILE: &str = "reports.csv";
pub const FRONTIER_COMP_FILE: &str = "frontier_comp.csv";
pub const FRONTIER_COMM_FILE: &str = "frontier_comm.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_FRONTIER_COMP_FILE: &str = "sweep_frontier_comp.csv";
pub const SWEEP_FRONTIER_COMM_FILE: &str = "sweep_frontier_comm.csv";

/// Everything produced by training, enough to evaluate without the plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedSystem {
    pub seed: u64,
    pub data: DataConfig,
    pub edge: ModelSpec,
    pub cloud: ModelSpec,
    pub paths: Vec<AdaptivePath>,
}

impl TrainedSystem {
    pub fn path(&self, adapter: &str) -> Option<&AdaptivePath> {
        self.paths.iter().find(|p| p.adapter.name == adapter)
    }

    /// Binds the edge, the original cloud and (optionally) one adaptive path.
    pub fn system(&self, adapter: Option<&str>) -> Result<EccSystem<'_>> {
        let path = match adapter {
            None => None,
            Some(name) => Some(
                self.path(name)
                    .ok_or_else(|| Error::usage(format!("no trained adapter `{name}`")))?,
            ),
        };
        EccSystem::new(&self.edge, &self.cloud, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, "system", self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sys: TrainedSystem = checkpoint::load(path, "system")?;
        sys.edge.validate()?;
        sys.cloud.validate()?;
        for p in &sys.paths {
            p.adapter.check_against(&sys.edge, &p.cloud)?;
        }
        Ok(sys)
    }
}

/// Generates the plan's data and splits it; both steps use seeds derived
/// from `seed`.
pub fn prepare_data(cfg: &DataConfig, seed: u64) -> Result<SplitData> {
    let all = gen_from_config(cfg, sub_seed(seed, "data"))?;
    let (train, val) = all.stratified_split(cfg.val_fraction, sub_seed(seed, "split"));
    Ok(SplitData { train, val })
}

fn init_rng(plan: &ExperimentPlan, purpose: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(plan.seed, &format!("init/{purpose}")))
}

/// Freshly initialized edge model of the plan.
pub fn init_edge(plan: &ExperimentPlan) -> Result<ModelSpec> {
    let d = &plan.data;
    ModelSpec::build(&plan.edge, d.dim, d.num_classes, d.normal_class, &mut init_rng(plan, "edge"))
}

pub fn init_cloud(plan: &ExperimentPlan) -> Result<ModelSpec> {
    let d = &plan.data;
    ModelSpec::build(&plan.cloud, d.dim, d.num_classes, d.normal_class, &mut init_rng(plan, "cloud"))
}

pub fn init_adapter(plan: &ExperimentPlan, def: &AdapterDef, edge: &ModelSpec, cloud: &ModelSpec) -> Result<AdapterSpec> {
    let mut rng = init_rng(plan, &format!("adapter/{}", def.name));
    AdapterSpec::new(&def.name, edge, def.edge_tap, cloud, def.cloud_tap, def.blocks, &mut rng)
}

/// Trains the cloud on its own.
pub fn train_cloud(plan: &ExperimentPlan, data: &Dataset) -> Result<(ModelSpec, TrainLog)> {
    let mut cloud = init_cloud(plan)?;
    let log = train_base(&mut cloud, data, &plan.seeded(&plan.train.cloud, Stage::Base, "train/cloud"))?;
    Ok((cloud, log))
}

/// Trained edge, adaptive paths and the per-stage logs.
pub type EdgeStages = (ModelSpec, Vec<AdaptivePath>, Vec<(String, TrainLog)>);

/// Stages 2 and 3 given a trained cloud: edge distillation through the first
/// adapter (edge-frozen distillation for the others), then fine-tuning of
/// every adapter against its own copy of the cloud.
pub fn train_edge_and_adapters(
    plan: &ExperimentPlan,
    cloud: &ModelSpec,
    data: &Dataset,
) -> Result<EdgeStages> {
    let mut edge = init_edge(plan)?;
    let mut logs = Vec::new();
    let mut adapters = plan
        .adapters
        .iter()
        .map(|def| init_adapter(plan, def, &edge, cloud))
        .collect::<Result<Vec<_>>>()?;

    let combined = plan.recall_boost == RecallBoost::Combined;
    let edge_stage = if combined { Stage::RecallBoost } else { Stage::KdEdge };
    let edge_cfg = plan.seeded(&plan.train.edge, edge_stage, "train/edge");
    match adapters.first_mut() {
        Some(first) => {
            let opts = KdOptions {
                freeze_edge: false,
                recall_boost: combined,
            };
            logs.push(("train_edge".into(), train_edge_kd(&mut edge, cloud, first, data, &edge_cfg, opts)?));
        }
        None => logs.push(("train_edge".into(), train_base(&mut edge, data, &edge_cfg)?)),
    }
    if plan.recall_boost == RecallBoost::Phased {
        // the first adapter catches up with the boosted edge during fine-tuning
        let cfg = plan.seeded(&plan.train.edge, Stage::RecallBoost, "train/edge/recall");
        logs.push(("recall_boost_edge".into(), train_recall_boost(&mut edge, data, &cfg)?));
    }
    for adapter in adapters.iter_mut().skip(1) {
        let cfg = plan.seeded(&plan.train.adapter, Stage::KdEdge, &format!("train/adapter/{}", adapter.name));
        let opts = KdOptions {
            freeze_edge: true,
            recall_boost: false,
        };
        let log = train_edge_kd(&mut edge, cloud, adapter, data, &cfg, opts)?;
        logs.push((format!("train_adapter_{}", adapter.name), log));
    }

    let mut paths = Vec::with_capacity(adapters.len());
    for mut adapter in adapters {
        let mut tuned = cloud.clone();
        let cfg = plan.seeded(&plan.train.finetune, Stage::AdapterFinetune, &format!("finetune/{}", adapter.name));
        let log = finetune_adapter(&edge, &mut tuned, &mut adapter, data, &cfg)?;
        logs.push((format!("finetune_{}", adapter.name), log));
        paths.push(AdaptivePath::new(adapter, tuned));
    }
    Ok((edge, paths, logs))
}

/// All training stages in order.
pub fn train_system(plan: &ExperimentPlan, data: &Dataset) -> Result<(TrainedSystem, Vec<(String, TrainLog)>)> {
    let (cloud, cloud_log) = train_cloud(plan, data)?;
    let (edge, paths, mut logs) = train_edge_and_adapters(plan, &cloud, data)?;
    logs.insert(0, ("train_cloud".into(), cloud_log));
    let system = TrainedSystem {
        seed: plan.seed,
        data: plan.data.clone(),
        edge,
        cloud,
        paths,
    };
    Ok((system, logs))
}

/// Edge and cloud baseline records plus the anchors derived from them.
pub struct Baselines {
    pub edge: Vec<RouteRecord>,
    pub cloud: Vec<RouteRecord>,
    pub anchors: Anchors,
}

pub fn baselines(system: &TrainedSystem, val: &Dataset, bytes_per_element: u64) -> Result<Baselines> {
    let sys = system.system(None)?;
    let edge = baseline_records(&sys, Baseline::Edge, &val.features, bytes_per_element)?;
    let cloud = baseline_records(&sys, Baseline::Cloud, &val.features, bytes_per_element)?;
    let acc = |r: &[RouteRecord]| {
        let preds: Vec<usize> = r.iter().map(|r| r.prediction).collect();
        crate::train::accuracy(&preds, &val.labels)
    };
    let anchors = Anchors {
        flops_edge: system.edge.flops() as f64,
        flops_cloud: system.cloud.flops() as f64,
        pi_edge: acc(&edge),
        pi_cloud: acc(&cloud),
        input_bytes: val.dim() as u64 * bytes_per_element,
        normal_class: val.normal_class,
    };
    Ok(Baselines { edge, cloud, anchors })
}

/// Routes `val` through one policy and scores it.
pub fn evaluate_policy(
    system: &TrainedSystem,
    policy: &EccPolicy,
    val: &Dataset,
    anchors: &Anchors,
) -> Result<(CostReport, Vec<RouteRecord>)> {
    let sys = system.system(policy.adapter())?;
    let records = route_batch(&sys, policy, &val.features)?;
    let a = Anchors {
        input_bytes: val.dim() as u64 * policy.bytes_per_element,
        ..*anchors
    };
    Ok((CostReport::from_records(policy.label(), &records, &val.labels, &a)?, records))
}

/// Edge and cloud baselines followed by every policy, in plan order.
pub fn evaluate_system(system: &TrainedSystem, policies: &[EccPolicy], val: &Dataset) -> Result<Vec<CostReport>> {
    let b = baselines(system, val, crate::policy::DEFAULT_BYTES_PER_ELEMENT)?;
    let mut reports = vec![
        CostReport::from_records("edge", &b.edge, &val.labels, &b.anchors)?,
        CostReport::from_records("cloud", &b.cloud, &val.labels, &b.anchors)?,
    ];
    for r in par::map(policies, |p| evaluate_policy(system, p, val, &b.anchors).map(|(r, _)| r)) {
        reports.push(r?);
    }
    Ok(reports)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchCounts {
    pub edge: usize,
    pub adaptive: usize,
    pub cloud: usize,
}

impl BranchCounts {
    pub fn of(records: &[RouteRecord]) -> Self {
        let mut c = BranchCounts::default();
        for r in records {
            match r.route {
                Route::EdgeOnly => c.edge += 1,
                Route::Adaptive => c.adaptive += 1,
                Route::FullCloud => c.cloud += 1,
            }
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub c2: f64,
    pub report: CostReport,
    pub counts: BranchCounts,
    pub records: Vec<RouteRecord>,
}

/// A dynamic-threshold sweep. `adaptive` and `independent` are the two
/// endpoint policies with the same `c1`; the frontiers are taken over the
/// grid points together with both endpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub c1: f64,
    pub points: Vec<SweepPoint>,
    pub adaptive: SweepPoint,
    pub independent: SweepPoint,
    pub frontier_comp: Vec<ReportRow>,
    pub frontier_comm: Vec<ReportRow>,
}

impl Sweep {
    /// Grid points followed by the two endpoints.
    pub fn all_rows(&self) -> Vec<ReportRow> {
        self.points
            .iter()
            .chain([&self.adaptive, &self.independent])
            .map(|p| p.report.row())
            .collect()
    }

    /// Columns: `c2,label,s_p,s_comp,s_comm,tau,psi,flops_ecc,accuracy,
    /// recall,edge_count,adaptive_count,cloud_count`. The endpoints come last
    /// with `c2` set to 0 (adaptive) and `c1` (independent).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "c2",
            "label",
            "s_p",
            "s_comp",
            "s_comm",
            "tau",
            "psi",
            "flops_ecc",
            "accuracy",
            "recall",
            "edge_count",
            "adaptive_count",
            "cloud_count",
        ])?;
        let endpoints = [(0.0, &self.adaptive), (self.c1, &self.independent)];
        for (c2, p) in self.points.iter().map(|p| (p.c2, p)).chain(endpoints) {
            let r = &p.report;
            w.write_record([
                c2.to_string(),
                r.label.clone(),
                r.s_p.map(|v| v.to_string()).unwrap_or_default(),
                r.s_comp.to_string(),
                r.s_comm.to_string(),
                r.tau.to_string(),
                r.psi.to_string(),
                r.flops_ecc.to_string(),
                r.accuracy.to_string(),
                r.recall.to_string(),
                p.counts.edge.to_string(),
                p.counts.adaptive.to_string(),
                p.counts.cloud.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

/// Evaluates `Dynamic(c1, c2, adapter)` for every `c2` in the ascending grid.
pub fn sweep_dynamic(system: &TrainedSystem, adapter: &str, c1: f64, c2_grid: &[f64], val: &Dataset) -> Result<Sweep> {
    check_grid(c1, c2_grid).map_err(|reason| Error::config("c2_grid", reason))?;
    let b = baselines(system, val, crate::policy::DEFAULT_BYTES_PER_ELEMENT)?;
    let point = |c2: f64, policy: EccPolicy| -> Result<SweepPoint> {
        let (report, records) = evaluate_policy(system, &policy, val, &b.anchors)?;
        Ok(SweepPoint {
            c2,
            report,
            counts: BranchCounts::of(&records),
            records,
        })
    };
    let points = par::map(c2_grid, |&c2| point(c2, EccPolicy::dynamic(c1, c2, adapter)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let adaptive = point(0.0, EccPolicy::adaptive(c1, adapter))?;
    let independent = point(c1, EccPolicy::independent(c1))?;
    let mut sweep = Sweep {
        c1,
        points,
        adaptive,
        independent,
        frontier_comp: Vec::new(),
        frontier_comm: Vec::new(),
    };
    let rows = sweep.all_rows();
    sweep.frontier_comp = frontier_rows(&rows, |r| r.s_comp)?;
    sweep.frontier_comm = frontier_rows(&rows, |r| r.s_comm)?;
    Ok(sweep)
}

fn write_file(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_report_files(dir: &Path, rows: &[ReportRow], names: [&str; 3]) -> Result<()> {
    write_file(&dir.join(names[0]), |b| write_rows(rows, b))?;
    write_file(&dir.join(names[1]), |b| write_rows(&frontier_rows(rows, |r| r.s_comp)?, b))?;
    write_file(&dir.join(names[2]), |b| write_rows(&frontier_rows(rows, |r| r.s_comm)?, b))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Trains every stage and writes `system.json` plus the training logs.
pub fn train_to_dir(plan: &ExperimentPlan, dir: &Path) -> Result<(TrainedSystem, Vec<(String, TrainLog)>)> {
    ensure_dir(dir)?;
    let data = prepare_data(&plan.data, plan.seed)?;
    let (system, logs) = train_system(plan, &data.train)?;
    system.save(&dir.join(SYSTEM_FILE))?;
    for (name, log) in &logs {
        log.save_csv(&dir.join(format!("{name}.csv")))?;
    }
    Ok((system, logs))
}

fn load_trained(dir: &Path) -> Result<(TrainedSystem, SplitData)> {
    let system = TrainedSystem::load(&dir.join(SYSTEM_FILE))?;
    let data = prepare_data(&system.data, system.seed)?;
    Ok((system, data))
}

/// Evaluates the plan's policies against the system in `dir` on its
/// validation split and writes `reports.csv` and both frontiers.
pub fn evaluate_dir(policies: &[EccPolicy], dir: &Path) -> Result<Vec<CostReport>> {
    let (system, data) = load_trained(dir)?;
    let reports = evaluate_system(&system, policies, &data.val)?;
    let rows: Vec<ReportRow> = reports.iter().map(CostReport::row).collect();
    write_report_files(dir, &rows, [REPORTS_FILE, FRONTIER_COMP_FILE, FRONTIER_COMM_FILE])?;
    Ok(reports)
}

/// Runs a sweep against the system in `dir` and writes `sweep.csv` and the
/// sweep frontiers.
pub fn sweep_dir(adapter: &str, c1: f64, c2_grid: &[f64], dir: &Path) -> Result<Sweep> {
    let (system, data) = load_trained(dir)?;
    let sweep = sweep_dynamic(&system, adapter, c1, c2_grid, &data.val)?;
    write_file(&dir.join(SWEEP_FILE), |b| sweep.write_csv(b))?;
    write_file(&dir.join(SWEEP_FRONTIER_COMP_FILE), |b| write_rows(&sweep.frontier_comp, b))?;
    write_file(&dir.join(SWEEP_FRONTIER_COMM_FILE), |b| write_rows(&sweep.frontier_comm, b))?;
    Ok(sweep)
}

pub struct ExperimentOutcome {
    pub system: TrainedSystem,
    pub logs: Vec<(String, TrainLog)>,
    pub reports: Vec<CostReport>,
    pub sweep: Option<Sweep>,
}

/// Train, evaluate and (if the plan has one) sweep, writing every output
/// file into `dir`.
pub fn run_experiment(plan: &ExperimentPlan, dir: &Path) -> Result<ExperimentOutcome> {
    plan.validate()?;
    let (system, logs) = train_to_dir(plan, dir)?;
    let reports = evaluate_dir(&plan.policies, dir)?;
    let sweep = match &plan.sweep {
        Some(s) => Some(sweep_dir(&s.adapter, s.c1, &s.c2_grid, dir)?),
        None => None,
    };
    Ok(ExperimentOutcome {
        system,
        logs,
        reports,
        sweep,
    })
}
