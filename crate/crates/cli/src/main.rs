//! `ecc` command-line tool.
//!
//! Exit status: 0 on success, 2 for usage or configuration errors, 3 when
//! training diverges, 1 for anything else (I/O, corrupt files).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ecc_core::harness::experiment::{
    self, prepare_data, TrainedSystem, FRONTIER_COMM_FILE, FRONTIER_COMP_FILE, REPORTS_FILE, SWEEP_FILE, SYSTEM_FILE,
};
use ecc_core::harness::plan::ExperimentPlan;
use ecc_core::metrics::{read_rows, ReportRow};
use ecc_core::policy::Variant;
use ecc_core::Error;

const DEFAULT_OUT: &str = "ecc-out";

#[derive(Parser)]
#[command(name = "ecc", version, about = "Edge-cloud collaborative inference simulator")]
struct Cli {
    /// Master seed; overrides the plan's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to $ECC_OUT_DIR, then the plan's
    /// `output_dir`, then `ecc-out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct PlanArg {
    /// Experiment plan (TOML). Without one the standard plan is used.
    #[arg(long)]
    plan: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the plan's dataset and write `dataset.json`.
    GenData(PlanArg),
    /// Train every stage; writes `system.json` and training logs.
    Train(PlanArg),
    /// Evaluate the plan's policies; writes `reports.csv` and frontiers.
    Evaluate {
        #[command(flatten)]
        plan: PlanArg,
        /// Replace `c1` in every policy.
        #[arg(long)]
        c1: Option<f64>,
    },
    /// Sweep the dynamic policy's `c2`; writes `sweep.csv` and frontiers.
    Sweep {
        #[command(flatten)]
        plan: PlanArg,
        #[arg(long)]
        adapter: Option<String>,
        #[arg(long)]
        c1: Option<f64>,
        /// Comma-separated ascending `c2` values.
        #[arg(long, value_delimiter = ',')]
        c2: Option<Vec<f64>>,
    },
    /// Re-filter an existing reports CSV into the two frontier files.
    Frontier {
        reports: PathBuf,
    },
    /// Print a reports CSV as an aligned table.
    Report {
        reports: PathBuf,
    },
}

fn load_plan(arg: &PlanArg, seed: Option<u64>) -> Result<ExperimentPlan, Error> {
    let mut plan = match &arg.plan {
        Some(path) => ExperimentPlan::load(path)?,
        None => ExperimentPlan::default(),
    };
    if let Some(s) = seed {
        plan.seed = s;
    }
    Ok(plan)
}

fn out_dir(cli: &Cli, plan: Option<&ExperimentPlan>) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os("ECC_OUT_DIR").map(PathBuf::from))
        .or_else(|| plan.and_then(|p| p.output_dir.clone()))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn check_seed(cli: &Cli, dir: &Path) -> Result<(), Error> {
    if let Some(seed) = cli.seed {
        let system = TrainedSystem::load(&dir.join(SYSTEM_FILE))?;
        if system.seed != seed {
            return Err(Error::Usage(format!(
                "--seed {seed} does not match the trained system's seed {}",
                system.seed
            )));
        }
    }
    Ok(())
}

fn read_reports(path: &Path) -> Result<Vec<ReportRow>, Error> {
    let file = std::fs::File::open(path).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })?;
    read_rows(std::io::BufReader::new(file))
}

fn run(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::GenData(arg) => {
            let plan = load_plan(arg, cli.seed)?;
            let dir = out_dir(cli, Some(&plan));
            std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            let data = prepare_data(&plan.data, plan.seed)?;
            let path = dir.join("dataset.json");
            data.save(&path)?;
            println!("wrote {} ({} train, {} val)", path.display(), data.train.len(), data.val.len());
        }
        Command::Train(arg) => {
            let plan = load_plan(arg, cli.seed)?;
            let dir = out_dir(cli, Some(&plan));
            let (_, logs) = experiment::train_to_dir(&plan, &dir)?;
            for (name, log) in &logs {
                let r = log.last();
                println!("{name}: ce {:.4} acc {:.4} recall {:.4}", r.ce_loss, r.accuracy, r.recall);
            }
            println!("wrote {}", dir.join(SYSTEM_FILE).display());
        }
        Command::Evaluate { plan: arg, c1 } => {
            let mut plan = load_plan(arg, None)?;
            let dir = out_dir(cli, Some(&plan));
            check_seed(cli, &dir)?;
            if let Some(v) = c1 {
                for p in &mut plan.policies {
                    match &mut p.variant {
                        Variant::Independent { c1 } | Variant::Adaptive { c1, .. } | Variant::Dynamic { c1, .. } => *c1 = *v,
                    }
                }
                for (i, p) in plan.policies.iter().enumerate() {
                    p.validate(&format!("policies[{i}]"))?;
                }
            }
            let reports = experiment::evaluate_dir(&plan.policies, &dir)?;
            println!("wrote {} ({} rows)", dir.join(REPORTS_FILE).display(), reports.len());
        }
        Command::Sweep {
            plan: arg,
            adapter,
            c1,
            c2,
        } => {
            let plan = load_plan(arg, None)?;
            let dir = out_dir(cli, Some(&plan));
            check_seed(cli, &dir)?;
            let base = plan.sweep.clone();
            let adapter = adapter
                .clone()
                .or_else(|| base.as_ref().map(|s| s.adapter.clone()))
                .ok_or_else(|| Error::Usage("no adapter given and the plan has no sweep section".into()))?;
            let c1 = c1.or(base.as_ref().map(|s| s.c1)).unwrap_or(ecc_core::harness::plan::DEFAULT_C1);
            let grid = c2
                .clone()
                .or_else(|| base.map(|s| s.c2_grid))
                .unwrap_or_else(|| ecc_core::harness::plan::DEFAULT_C2_GRID.to_vec());
            let sweep = experiment::sweep_dir(&adapter, c1, &grid, &dir)?;
            println!(
                "wrote {} ({} points, {} on the computation frontier)",
                dir.join(SWEEP_FILE).display(),
                sweep.points.len() + 2,
                sweep.frontier_comp.len()
            );
        }
        Command::Frontier { reports } => {
            let rows = read_reports(reports)?;
            let dir = match &cli.out {
                Some(d) => d.clone(),
                None => reports.parent().map(Path::to_path_buf).unwrap_or_default(),
            };
            std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            let names = ["", FRONTIER_COMP_FILE, FRONTIER_COMM_FILE];
            write_frontiers(&dir, &rows, names)?;
            println!("wrote {} and {}", dir.join(names[1]).display(), dir.join(names[2]).display());
        }
        Command::Report { reports } => {
            print!("{}", format_table(&read_reports(reports)?));
        }
    }
    Ok(())
}

fn write_frontiers(dir: &Path, rows: &[ReportRow], names: [&str; 3]) -> Result<(), Error> {
    use ecc_core::metrics::{frontier_rows, write_rows};
    for (name, front) in [
        (names[1], frontier_rows(rows, |r| r.s_comp)?),
        (names[2], frontier_rows(rows, |r| r.s_comm)?),
    ] {
        let path = dir.join(name);
        let mut buf = Vec::new();
        write_rows(&front, &mut buf)?;
        std::fs::write(&path, buf).map_err(|e| Error::Io { path, source: e })?;
    }
    Ok(())
}

fn format_table(rows: &[ReportRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(6);
    let mut out = format!(
        "{:<width$}  {:>8}  {:>8}  {:>7}  {:>7}  {:>7}  {:>12}\n",
        "system", "accuracy", "recall", "S_p", "S_comp", "S_comm", "FLOPS"
    );
    for r in rows {
        let sp = r.s_p.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        out += &format!(
            "{:<width$}  {:>8.2}  {:>8.2}  {:>7}  {:>7.4}  {:>7.4}  {:>12.1}\n",
            r.label,
            100.0 * r.accuracy,
            100.0 * r.recall,
            sp,
            r.s_comp,
            r.s_comm,
            r.flops_ecc
        );
    }
    out
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Usage(_) | Error::Dimension { .. } => 2,
        Error::Diverged { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_has_one_line_per_row() {
        let row = ReportRow {
            label: "ECC_I(c1=0.8)".into(),
            s_p: None,
            s_comp: 0.66,
            s_comm: 0.61,
            tau: 0.61,
            psi: 1.0,
            flops_ecc: 26880.0,
            accuracy: 0.91,
            recall: 0.95,
        };
        let t = format_table(&[row.clone(), row]);
        assert_eq!(t.lines().count(), 3);
        assert!(t.lines().nth(1).unwrap().contains("  -  ") || t.contains(" - "));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Usage("x".into())), 2);
        let d = Error::Diverged {
            stage: "base".into(),
            epoch: 1,
            detail: "nan".into(),
        };
        assert_eq!(exit_code(&d), 3);
        assert_eq!(exit_code(&Error::FrozenMutated("x".into())), 1);
    }
}
