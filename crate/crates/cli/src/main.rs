use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fedrac::assignment::{assign_participants, TrainingMode};
use fedrac::config::{ExperimentConfig, Method};
use fedrac::engine::{
    assignment_params, cluster_plans, cluster_population, prepare, run_experiment, ExperimentReport,
};
use fedrac::report::render_tables;
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "fedrac",
    version,
    about = "Resource-aware clustered federated learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pick the cluster count by Dunn index and group participants by resources.
    Cluster(RunArgs),
    /// Plan the clusters and assign every participant to one.
    Assign(RunArgs),
    /// Run a full training simulation and write its reports.
    Simulate(RunArgs),
    /// Print accuracy and round tables from report files or output directories.
    Report {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Parallel,
    Sequential,
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Distil slave clusters from the master model.
    #[arg(long, overrides_with = "no_kd")]
    kd: bool,
    #[arg(long, overrides_with = "kd")]
    no_kd: bool,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// fedrac, fedavg or fedprox.
    #[arg(long)]
    baseline: Option<Method>,
    /// Number of clusters to train (defaults to the Dunn-optimal count).
    #[arg(long)]
    m: Option<usize>,
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if self.kd {
            cfg.kd.enabled = true;
        }
        if self.no_kd {
            cfg.kd.enabled = false;
        }
        if let Some(mode) = self.mode {
            cfg.timing.mode = match mode {
                ModeArg::Parallel => TrainingMode::Parallel,
                ModeArg::Sequential => TrainingMode::Sequential,
            };
        }
        if let Some(b) = self.baseline {
            cfg.baseline = b;
        }
        if self.m.is_some() {
            cfg.clustering.m = self.m;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        std::fs::create_dir_all(&self.out_dir)
            .with_context(|| format!("creating {}", self.out_dir.display()))?;
        Ok(&self.out_dir)
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cluster(args: &RunArgs) -> Result<()> {
    let cfg = args.config()?;
    let records = cfg.population()?;
    let outcome = cluster_population(&cfg, &records)?;
    let ids = |members: Vec<usize>| {
        members
            .into_iter()
            .map(|i| records[i].id.clone())
            .collect::<Vec<_>>()
    };
    let trained: Vec<Vec<String>> = match &outcome.compacted {
        Some(p) => p.clusters().into_iter().map(ids).collect(),
        None => vec![records.iter().map(|r| r.id.clone()).collect()],
    };
    println!("k* = {} (training {} clusters)", outcome.k_star, outcome.m);
    for point in &outcome.curve {
        match point.dunn_index {
            Some(v) => println!("  DI({}) = {v:.4}", point.k),
            None => println!("  DI({}) = unbounded", point.k),
        }
    }
    for (f, members) in trained.iter().enumerate() {
        println!("C{}: {}", f + 1, members.join(" "));
    }
    let path = args.out_dir()?.join("clusters.json");
    write_json(
        &path,
        &json!({
            "k_star": outcome.k_star,
            "dunn_curve": outcome.curve,
            "m": outcome.m,
            "optimal": outcome.ordered.clusters().into_iter().map(ids).collect::<Vec<_>>(),
            "clusters": trained,
        }),
    )?;
    println!("wrote {}", path.display());
    Ok(())
}

fn assign(args: &RunArgs) -> Result<()> {
    let cfg = args.config()?;
    let env = prepare(&cfg)?;
    let m = cluster_population(&cfg, &env.records)?.m;
    let plans = cluster_plans(&cfg, m)?;
    let assignment = assign_participants(
        &env.profiles,
        &plans,
        &assignment_params(&cfg)?,
        &cfg.timing,
    )?;
    for c in &assignment.clusters {
        println!(
            "C{} ({} members, E={}, R={}, budget {:.0}s): {}",
            c.rank,
            c.members.len(),
            c.epochs,
            c.rounds,
            c.mar_share,
            c.members.join(" ")
        );
    }
    let dir = args.out_dir()?;
    let csv_path = dir.join("assignment.csv");
    let file = std::fs::File::create(&csv_path)
        .with_context(|| format!("writing {}", csv_path.display()))?;
    assignment.write_csv(file)?;
    let plan_path = dir.join("plan.json");
    write_json(&plan_path, &serde_json::to_value(&assignment.clusters)?)?;
    println!("wrote {} and {}", csv_path.display(), plan_path.display());
    Ok(())
}

fn simulate(args: &RunArgs) -> Result<()> {
    let cfg = args.config()?;
    let outcome = run_experiment(&cfg)?;
    let r = &outcome.report;
    for c in &r.clusters {
        match c.final_accuracy {
            Some(acc) => println!(
                "C{}: {} members, final accuracy {:.4}",
                c.rank,
                c.members.len(),
                acc
            ),
            None => println!("C{}: empty", c.rank),
        }
    }
    println!(
        "global accuracy {:.4}, macro F1 {:.4}",
        r.global_accuracy, r.global_macro_f1
    );
    match r.total_required_rounds {
        Some(trr) => println!("total required rounds {trr}"),
        None => println!("total required rounds: threshold not reached"),
    }
    for path in outcome.write_to(args.out_dir()?)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn report(paths: &[PathBuf]) -> Result<()> {
    let reports = paths
        .iter()
        .map(|p| {
            let file = if p.is_dir() {
                p.join("report.json")
            } else {
                p.clone()
            };
            ExperimentReport::load(&file)
        })
        .collect::<Result<Vec<_>, _>>()?;
    print!("{}", render_tables(&reports));
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<fedrac::Error>() {
        Some(e) if e.is_infeasible() => 2,
        Some(e) if e.is_data_error() => 3,
        Some(_) => 1,
        None if err.downcast_ref::<std::io::Error>().is_some() => 3,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Cluster(args) => cluster(args),
        Command::Assign(args) => assign(args),
        Command::Simulate(args) => simulate(args),
        Command::Report { paths } => report(paths),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
