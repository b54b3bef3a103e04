//! Command-line front end: generate workloads, plan, run and explain failure
//! episodes, sweep, replay capacity traces, benchmark and call the exact oracle.
//!
//! Human-readable summaries go to stdout and machine output to the `--out`
//! file. Exit status: 0 on success, 1 on invalid input or configuration, 2
//! when an exact solve exceeds its budget.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use diagscale::model::{load_cluster, load_workload, save_cluster, save_workload};
use diagscale::oracle::{solve_exact, OracleBudget};
use diagscale::par::with_jobs;
use diagscale::planner::{FairKey, Overflow};
use diagscale::scheduler::{actions_to_json_lines, ActionKind};
use diagscale::sim::{
    bench, initial_placement, inject_failure, load_trace, replay_trace, run_episode, run_scheme, sweep,
    write_bench_csv, write_replay_csv, write_sweep_csv, BenchConfig, ReplayOptions, Scenario, ScenarioSpec, Scheme,
    SchemeOptions, SchemeSpec, SweepConfig,
};
use diagscale::workload::{generate_workload, GenSpec};
use diagscale::{plan, Application, ClusterState, Objective, PlannerOptions};
use serde::de::DeserializeOwned;

#[derive(Parser)]
#[command(
    name = "diagscale",
    version,
    about = "Criticality-aware degradation planning and failure simulation"
)]
struct Cli {
    /// Worker threads for parallel work (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OverflowArg {
    Break,
    Skip,
}

#[derive(Clone, Copy, ValueEnum)]
enum FairKeyArg {
    Marginal,
    Absolute,
}

#[derive(clap::Args)]
struct PlannerArgs {
    /// What ranking does with the first candidate that does not fit.
    #[arg(long, value_enum, default_value = "break")]
    overflow: OverflowArg,
    /// Fair scoring: change in total deviation, or deviation after activation.
    #[arg(long, value_enum, default_value = "marginal")]
    fair_key: FairKeyArg,
}

impl PlannerArgs {
    fn options(&self) -> PlannerOptions {
        PlannerOptions {
            overflow: match self.overflow {
                OverflowArg::Break => Overflow::Break,
                OverflowArg::Skip => Overflow::Skip,
            },
            fair_key: match self.fair_key {
                FairKeyArg::Marginal => FairKey::Marginal,
                FairKeyArg::Absolute => FairKey::Absolute,
            },
            ..PlannerOptions::default()
        }
    }
}

#[derive(clap::Args)]
struct Inputs {
    /// Workload JSON.
    #[arg(long)]
    workload: PathBuf,
    /// Cluster JSON; replicas without an assignment are placed best-fit.
    #[arg(long)]
    cluster: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a workload from a generator or scenario spec (JSON).
    Gen {
        #[arg(long)]
        spec: PathBuf,
        /// Overrides the seed in the input file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// With a scenario spec, where to write the placed cluster.
        #[arg(long)]
        cluster_out: Option<PathBuf>,
    },
    /// Rank microservices for the cluster's healthy capacity.
    Plan {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, default_value = "cost")]
        objective: Objective,
        #[command(flatten)]
        planner: PlannerArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Inject a failure and run one scheme.
    Run {
        #[command(flatten)]
        inputs: Inputs,
        /// Share of cluster capacity to fail, in [0, 1].
        #[arg(long)]
        fail: f64,
        #[arg(long, default_value = "diagonal")]
        scheme: Scheme,
        /// Only used by the diagonal scheme.
        #[arg(long, default_value = "cost")]
        objective: Objective,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        planner: PlannerArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Inject a failure and write the scheme's actions as JSON lines.
    Explain {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        fail: f64,
        #[arg(long, default_value = "diagonal")]
        scheme: Scheme,
        #[arg(long, default_value = "cost")]
        objective: Objective,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        planner: PlannerArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every (seed, failure fraction, scheme) of a sweep config (JSON).
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Replaces the config's seed list with this single seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay a `t_seconds,capacity_fraction` trace.
    Replay {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value = "diagonal")]
        scheme: Scheme,
        #[arg(long, default_value = "cost")]
        objective: Objective,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Seconds between a capacity change and the scheme reacting.
        #[arg(long, default_value_t = 15.0)]
        detect_seconds: f64,
        #[arg(long, default_value_t = 0.0)]
        act_seconds: f64,
        #[command(flatten)]
        planner: PlannerArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time planning and scheduling across cluster sizes.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "1000,10000,100000")]
        nodes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,0.9")]
        fail: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "diagonal-cost,diagonal-fair")]
        schemes: Vec<SchemeSpec>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve activation and placement exactly (small instances only).
    Oracle {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, default_value = "cost")]
        objective: Objective,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file)).with_context(|| format!("invalid JSON in {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut out = create(path)?;
    out.write_all(bytes)?;
    out.flush()?;
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

fn load_inputs(inputs: &Inputs) -> Result<(Vec<Application>, ClusterState)> {
    let file = File::open(&inputs.workload).with_context(|| format!("cannot open {}", inputs.workload.display()))?;
    let apps = load_workload(BufReader::new(file))
        .with_context(|| format!("invalid workload {}", inputs.workload.display()))?;
    let file = File::open(&inputs.cluster).with_context(|| format!("cannot open {}", inputs.cluster.display()))?;
    let cluster =
        load_cluster(BufReader::new(file)).with_context(|| format!("invalid cluster {}", inputs.cluster.display()))?;
    let cluster = initial_placement(&apps, &cluster)?;
    Ok((apps, cluster))
}

fn check_fraction(flag: &str, f: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&f) {
        bail!("--{flag} {f} is outside [0, 1]");
    }
    Ok(())
}

fn scheme_options(planner: &PlannerArgs) -> SchemeOptions {
    SchemeOptions {
        planner: planner.options(),
        ..SchemeOptions::default()
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Gen {
            spec,
            seed,
            out,
            cluster_out,
        } => {
            let value: serde_json::Value = read_json(&spec)?;
            // A scenario spec nests the generator spec under `workload`.
            if value.get("workload").is_some() {
                let mut scenario: ScenarioSpec = serde_json::from_value(value)
                    .with_context(|| format!("invalid scenario spec {}", spec.display()))?;
                if let Some(seed) = seed {
                    scenario.workload.seed = seed;
                }
                let Some(cluster_out) = cluster_out else {
                    bail!("--cluster-out is required with a scenario spec");
                };
                let Scenario { apps, cluster } = scenario.build()?;
                write_bytes(&out, &save_workload(&apps))?;
                write_bytes(&cluster_out, &save_cluster(&cluster))?;
                println!(
                    "{} applications, {} microservices, {} replicas on {} servers",
                    apps.len(),
                    apps.iter().map(Application::len).sum::<usize>(),
                    cluster.assignment().len(),
                    cluster.server_count()
                );
            } else {
                let mut gen: GenSpec = serde_json::from_value(value)
                    .with_context(|| format!("invalid generator spec {}", spec.display()))?;
                if let Some(seed) = seed {
                    gen.seed = seed;
                }
                if cluster_out.is_some() {
                    bail!("--cluster-out needs a scenario spec (with `workload`, `servers`, ...)");
                }
                let apps = generate_workload(&gen)?;
                write_bytes(&out, &save_workload(&apps))?;
                println!(
                    "{} applications, {} microservices",
                    apps.len(),
                    apps.iter().map(Application::len).sum::<usize>()
                );
            }
        }
        Command::Plan {
            inputs,
            objective,
            planner,
            out,
        } => {
            let (apps, cluster) = load_inputs(&inputs)?;
            let capacity = cluster.healthy_capacity();
            let report = plan(&apps, capacity, objective, planner.options());
            write_json(&out, &report.plan.to_json())?;
            let total: usize = apps.iter().map(Application::len).sum();
            println!(
                "{} plan: {} of {total} microservices within capacity {capacity:.3} in {:.3} ms",
                objective.as_str(),
                report.plan.len(),
                report.elapsed.as_secs_f64() * 1e3
            );
        }
        Command::Run {
            inputs,
            fail,
            scheme,
            objective,
            seed,
            planner,
            out,
        } => {
            check_fraction("fail", fail)?;
            let (apps, cluster) = load_inputs(&inputs)?;
            let spec = SchemeSpec::new(scheme, objective);
            let r = run_episode(&apps, &cluster, fail, spec, seed, scheme_options(&planner))?;
            write_json(&out, &r)?;
            println!(
                "{spec} at f={fail}: availability {:.3}, revenue {:.3}, deviation +{:.3}/-{:.3}, utilization {:.3}, \
                 {} deletes, {} migrations, {} restarts, {} dropped; plan {:.3} ms, schedule {:.3} ms",
                r.avail,
                r.revenue,
                r.pos_dev,
                r.neg_dev,
                r.util,
                r.deletes,
                r.migrations,
                r.restarts,
                r.dropped,
                r.plan_ms,
                r.sched_ms
            );
        }
        Command::Explain {
            inputs,
            fail,
            scheme,
            objective,
            seed,
            planner,
            out,
        } => {
            check_fraction("fail", fail)?;
            let (apps, cluster) = load_inputs(&inputs)?;
            let spec = SchemeSpec::new(scheme, objective);
            let (state, event) = inject_failure(&cluster, fail, seed);
            let run = run_scheme(&apps, &state, spec, scheme_options(&planner));
            write_bytes(&out, actions_to_json_lines(&run.outcome.actions).as_bytes())?;
            println!(
                "{spec} after failing {} servers: {} deletes, {} migrations, {} restarts; {} scheduled, {} dropped",
                event.failed.len(),
                run.outcome.count(ActionKind::Delete),
                run.outcome.count(ActionKind::Migrate),
                run.outcome.count(ActionKind::Restart),
                run.outcome.scheduled.len(),
                run.outcome.dropped.len()
            );
        }
        Command::Sweep { config, seed, out } => {
            let mut config: SweepConfig = read_json(&config)?;
            if let Some(seed) = seed {
                config.seeds = vec![seed];
            }
            let results = sweep(&config)?;
            write_sweep_csv(&results, config.timings, create(&out)?)?;
            println!(
                "{} episodes ({} seeds x {} failure levels x {} schemes) written to {}",
                results.len(),
                config.seeds.len(),
                config.failure_fracs.len(),
                config.schemes.len(),
                out.display()
            );
        }
        Command::Replay {
            inputs,
            trace,
            scheme,
            objective,
            seed,
            detect_seconds,
            act_seconds,
            planner,
            out,
        } => {
            if !(detect_seconds >= 0.0 && act_seconds >= 0.0) {
                bail!("--detect-seconds {detect_seconds} and --act-seconds {act_seconds} must be non-negative");
            }
            let (apps, cluster) = load_inputs(&inputs)?;
            let file = File::open(&trace).with_context(|| format!("cannot open {}", trace.display()))?;
            let points =
                load_trace(BufReader::new(file)).with_context(|| format!("invalid trace {}", trace.display()))?;
            let spec = SchemeSpec::new(scheme, objective);
            let replay = ReplayOptions {
                detect_seconds,
                act_seconds,
            };
            let result = replay_trace(&apps, &cluster, &points, spec, seed, scheme_options(&planner), replay)?;
            write_replay_csv(&result, create(&out)?)?;
            println!(
                "{spec}: {} trace points, cumulative served request weight {:.0}",
                result.points.len(),
                result.cumulative_served
            );
        }
        Command::Bench {
            nodes,
            fail,
            schemes,
            seed,
            out,
        } => {
            if nodes.contains(&0) {
                bail!("--nodes must be positive");
            }
            for &f in &fail {
                check_fraction("fail", f)?;
            }
            let config = BenchConfig {
                nodes,
                failure_fracs: fail,
                schemes,
                seed,
                ..BenchConfig::default()
            };
            let rows = bench(&config)?;
            write_bench_csv(&rows, create(&out)?)?;
            for &n in &config.nodes {
                let worst = rows
                    .iter()
                    .filter(|r| r.nodes == n)
                    .map(|r| (r.plan_ms, r.sched_ms))
                    .max_by(|a, b| (a.0 + a.1).total_cmp(&(b.0 + b.1)))
                    .unwrap_or_default();
                println!(
                    "{n:>7} nodes: worst plan {:.1} ms + schedule {:.1} ms",
                    worst.0, worst.1
                );
            }
        }
        Command::Oracle { inputs, objective, out } => {
            let (apps, cluster) = load_inputs(&inputs)?;
            let solution = solve_exact(&apps, &cluster, objective, OracleBudget::default())?;
            write_json(&out, &solution)?;
            println!(
                "{} optimum {:.4}: {} microservices active, {:.3} demand, {} search nodes in {:.3} ms",
                objective.as_str(),
                solution.value,
                solution.activation.len(),
                solution.activated_demand,
                solution.nodes,
                solution.solve_ms
            );
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let budget = err.chain().any(|e| {
        matches!(
            e.downcast_ref::<diagscale::Error>(),
            Some(diagscale::Error::BudgetExceeded(_))
        )
    });
    if budget {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match with_jobs(cli.jobs, || execute(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
