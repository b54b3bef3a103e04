//! Failure injection, episodes, metrics, parameter sweeps and capacity-trace
//! replay.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::time::Instant;

use ordered_float::OrderedFloat;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{baseline_default, fair_plan, priority_plan};
use crate::error::{Error, Result};
use crate::model::{Application, ClusterState, ReplicaKey};
use crate::oracle::{covered_weight, solve_exact, OracleBudget};
use crate::par::{self, Execution};
use crate::planner::{app_demands, compute_water_fill, plan_with, Objective, PlannerOptions};
use crate::scheduler::{schedule_with, PackingOutcome, SchedulerOptions};
use crate::workload::{generate_workload, GenSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Criticality-aware planner plus packing scheduler.
    Diagonal,
    Default,
    Fair,
    Priority,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Diagonal => "diagonal",
            Scheme::Default => "default",
            Scheme::Fair => "fair",
            Scheme::Priority => "priority",
        }
    }
}

impl FromStr for Scheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "diagonal" => Ok(Scheme::Diagonal),
            "default" => Ok(Scheme::Default),
            "fair" => Ok(Scheme::Fair),
            "priority" => Ok(Scheme::Priority),
            other => Err(format!(
                "unknown scheme `{other}` (expected diagonal, default, fair or priority)"
            )),
        }
    }
}

/// A scheme with its objective; only the diagonal scheme uses one.
/// Written `diagonal-cost`, `diagonal-fair`, `default`, `fair`, `priority`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SchemeSpec {
    pub scheme: Scheme,
    pub objective: Option<Objective>,
}

impl SchemeSpec {
    pub const DIAGONAL_COST: SchemeSpec = SchemeSpec::diagonal(Objective::Cost);
    pub const DIAGONAL_FAIR: SchemeSpec = SchemeSpec::diagonal(Objective::Fair);
    pub const DEFAULT: SchemeSpec = SchemeSpec::baseline(Scheme::Default);
    pub const FAIR: SchemeSpec = SchemeSpec::baseline(Scheme::Fair);
    pub const PRIORITY: SchemeSpec = SchemeSpec::baseline(Scheme::Priority);
    pub const ALL: [SchemeSpec; 5] = [
        SchemeSpec::DIAGONAL_COST,
        SchemeSpec::DIAGONAL_FAIR,
        SchemeSpec::FAIR,
        SchemeSpec::PRIORITY,
        SchemeSpec::DEFAULT,
    ];

    pub const fn diagonal(objective: Objective) -> Self {
        SchemeSpec {
            scheme: Scheme::Diagonal,
            objective: Some(objective),
        }
    }

    pub const fn baseline(scheme: Scheme) -> Self {
        SchemeSpec {
            scheme,
            objective: None,
        }
    }

    pub fn new(scheme: Scheme, objective: Objective) -> Self {
        match scheme {
            Scheme::Diagonal => SchemeSpec::diagonal(objective),
            other => SchemeSpec::baseline(other),
        }
    }
}

impl fmt::Display for SchemeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.objective {
            Some(o) => write!(f, "{}-{}", self.scheme.as_str(), o.as_str()),
            None => f.write_str(self.scheme.as_str()),
        }
    }
}

impl FromStr for SchemeSpec {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.split_once('-') {
            Some((scheme, objective)) => {
                let scheme: Scheme = scheme.parse()?;
                if scheme != Scheme::Diagonal {
                    return Err(format!("scheme `{s}`: only diagonal takes an objective"));
                }
                Ok(SchemeSpec::diagonal(objective.parse()?))
            }
            None => match s.parse::<Scheme>()? {
                Scheme::Diagonal => Err("scheme `diagonal` needs an objective: diagonal-cost or diagonal-fair".into()),
                other => Ok(SchemeSpec::baseline(other)),
            },
        }
    }
}

impl TryFrom<String> for SchemeSpec {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<SchemeSpec> for String {
    fn from(s: SchemeSpec) -> String {
        s.to_string()
    }
}

// ---------------------------------------------------------------------------
// Failure injection

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureEvent {
    pub failed: Vec<String>,
    pub fraction: f64,
    pub seed: u64,
}

/// Servers to fail for fraction `f`: a prefix of a seeded permutation, grown
/// while the failed capacity stays within half a server of `f * total`.
/// Prefixes of one permutation nest, so larger `f` fails a superset.
pub fn failure_set(cluster: &ClusterState, f: f64, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cluster.server_count()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let target = f.clamp(0.0, 1.0) * cluster.total_capacity();
    let mut failed_capacity = 0.0;
    let mut out = Vec::new();
    for s in order {
        let cap = cluster.servers()[s].capacity;
        if failed_capacity + cap / 2.0 > target + 1e-9 {
            break;
        }
        failed_capacity += cap;
        out.push(s);
    }
    out.sort_unstable();
    out
}

pub fn inject_failure(cluster: &ClusterState, f: f64, seed: u64) -> (ClusterState, FailureEvent) {
    let failed = failure_set(cluster, f, seed);
    let mut state = cluster.clone();
    state.fail_servers(&failed);
    let event = FailureEvent {
        failed: failed.iter().map(|&s| cluster.servers()[s].id.clone()).collect(),
        fraction: f,
        seed,
    };
    (state, event)
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Availability {
    pub per_app: BTreeMap<String, bool>,
    pub mean: f64,
}

/// An application counts as available when every replica of every C1
/// microservice is placed.
pub fn critical_availability(apps: &[Application], state: &ClusterState) -> Availability {
    let running = state.running_replicas();
    let per_app: BTreeMap<String, bool> = apps
        .iter()
        .map(|a| {
            let ok = a
                .microservices()
                .iter()
                .filter(|m| m.tag.is_most_critical())
                .all(|m| running.get(&(a.id(), m.id.as_str())).copied().unwrap_or(0) >= m.replicas);
            (a.id().to_string(), ok)
        })
        .collect();
    let mean = if per_app.is_empty() {
        0.0
    } else {
        per_app.values().filter(|&&v| v).count() as f64 / per_app.len() as f64
    };
    Availability { per_app, mean }
}

/// Revenue of fully placed microservices: price times demand.
pub fn revenue(apps: &[Application], state: &ClusterState) -> f64 {
    let running = state.running_replicas();
    apps.iter()
        .map(|a| {
            a.price_per_unit()
                * a.microservices()
                    .iter()
                    .filter(|m| running.get(&(a.id(), m.id.as_str())).copied().unwrap_or(0) >= m.replicas)
                    .map(|m| m.demand)
                    .sum::<f64>()
        })
        .sum()
}

/// Placed demand per application.
pub fn allocations(apps: &[Application], state: &ClusterState) -> BTreeMap<String, f64> {
    let mut out: BTreeMap<String, f64> = apps.iter().map(|a| (a.id().to_string(), 0.0)).collect();
    for (key, p) in state.assignment() {
        if let Some(v) = out.get_mut(&*key.app) {
            *v += p.demand;
        }
    }
    out
}

/// Positive and negative deviation of placed demand from the water-fill
/// share of `capacity`, each divided by `capacity`.
pub fn fairness_deviation(apps: &[Application], state: &ClusterState, capacity: f64) -> (f64, f64) {
    if capacity <= 0.0 {
        return (0.0, 0.0);
    }
    let shares = compute_water_fill(&app_demands(apps), capacity);
    let (mut pos, mut neg) = (0.0, 0.0);
    for (app, alloc) in allocations(apps, state) {
        let share = shares.get(&app);
        pos += (alloc - share).max(0.0);
        neg += (share - alloc).max(0.0);
    }
    (pos / capacity, neg / capacity)
}

pub fn utilization(state: &ClusterState) -> f64 {
    let healthy = state.healthy_capacity();
    if healthy <= 0.0 {
        0.0
    } else {
        (state.total_used() / healthy).min(1.0)
    }
}

/// Request weight of call graphs whose microservices are all active.
pub fn served_weight(apps: &[Application], state: &ClusterState) -> u64 {
    crate::oracle::active_sets(apps, state)
        .iter()
        .zip(apps)
        .map(|(active, app)| covered_weight(app, active))
        .sum()
}

// ---------------------------------------------------------------------------
// Episodes

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SchemeOptions {
    #[serde(default)]
    pub planner: PlannerOptions,
    #[serde(default)]
    pub scheduler: SchedulerOptions,
}

#[derive(Clone, Debug)]
pub struct SchemeRun {
    pub outcome: PackingOutcome,
    pub plan_ms: f64,
    pub sched_ms: f64,
}

/// Runs one scheme on a state whose failed servers are already emptied.
pub fn run_scheme(apps: &[Application], state: &ClusterState, scheme: SchemeSpec, options: SchemeOptions) -> SchemeRun {
    let capacity = state.healthy_capacity();
    let started = Instant::now();
    let plan = match scheme.scheme {
        Scheme::Diagonal => {
            let objective = scheme.objective.unwrap_or(Objective::Cost).instantiate(apps, capacity);
            Some(plan_with(apps, capacity, &objective, options.planner))
        }
        Scheme::Fair => Some(fair_plan(apps, capacity)),
        Scheme::Priority => Some(priority_plan(apps, capacity)),
        Scheme::Default => None,
    };
    let plan_ms = started.elapsed().as_secs_f64() * 1e3;
    let started = Instant::now();
    let outcome = match plan {
        Some(plan) => schedule_with(&plan, state, apps, options.scheduler),
        None => baseline_default(apps, state),
    };
    SchemeRun {
        outcome,
        plan_ms,
        sched_ms: started.elapsed().as_secs_f64() * 1e3,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub scheme: Scheme,
    pub objective: Option<Objective>,
    pub failure_frac: f64,
    pub seed: u64,
    pub per_app: BTreeMap<String, bool>,
    /// Available applications relative to before the failure.
    pub avail: f64,
    /// Served call-graph weight relative to before the failure.
    pub avail_weighted: f64,
    pub revenue: f64,
    pub pos_dev: f64,
    pub neg_dev: f64,
    pub util: f64,
    pub plan_ms: f64,
    pub sched_ms: f64,
    pub deletes: usize,
    pub migrations: usize,
    pub restarts: usize,
    pub dropped: usize,
    pub failed_servers: usize,
}

impl EpisodeResult {
    pub fn scheme_spec(&self) -> SchemeSpec {
        SchemeSpec {
            scheme: self.scheme,
            objective: self.objective,
        }
    }
}

fn ratio(after: f64, before: f64) -> f64 {
    if before > 0.0 {
        after / before
    } else {
        0.0
    }
}

/// Baseline numbers of the unaffected cluster, used for normalization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reference {
    pub avail: f64,
    pub revenue: f64,
    pub served: u64,
}

impl Reference {
    pub fn of(apps: &[Application], state: &ClusterState) -> Self {
        Reference {
            avail: critical_availability(apps, state).mean,
            revenue: revenue(apps, state),
            served: served_weight(apps, state),
        }
    }
}

fn measure(
    apps: &[Application],
    state: &ClusterState,
    reference: Reference,
) -> (Availability, f64, f64, (f64, f64), f64) {
    let availability = critical_availability(apps, state);
    let avail = ratio(availability.mean, reference.avail);
    let weighted = ratio(served_weight(apps, state) as f64, reference.served as f64);
    let rev = ratio(revenue(apps, state), reference.revenue);
    let dev = fairness_deviation(apps, state, state.healthy_capacity());
    (availability, avail, weighted, dev, rev)
}

/// Inject, run the scheme, validate, measure.
pub fn run_episode(
    apps: &[Application],
    cluster: &ClusterState,
    f: f64,
    scheme: SchemeSpec,
    seed: u64,
    options: SchemeOptions,
) -> Result<EpisodeResult> {
    run_episode_with_reference(apps, cluster, Reference::of(apps, cluster), f, scheme, seed, options)
}

pub fn run_episode_with_reference(
    apps: &[Application],
    cluster: &ClusterState,
    reference: Reference,
    f: f64,
    scheme: SchemeSpec,
    seed: u64,
    options: SchemeOptions,
) -> Result<EpisodeResult> {
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::InvalidConfig(format!("failure fraction {f} is outside [0, 1]")));
    }
    let (state, event) = inject_failure(cluster, f, seed);
    let run = run_scheme(apps, &state, scheme, options);
    let after = &run.outcome.state;
    after.validate_against(apps)?;
    let (availability, avail, avail_weighted, (pos_dev, neg_dev), rev) = measure(apps, after, reference);
    Ok(EpisodeResult {
        scheme: scheme.scheme,
        objective: scheme.objective,
        failure_frac: f,
        seed,
        per_app: availability.per_app,
        avail,
        avail_weighted,
        revenue: rev,
        pos_dev,
        neg_dev,
        util: utilization(after),
        plan_ms: run.plan_ms,
        sched_ms: run.sched_ms,
        deletes: run.outcome.stats.deletes,
        migrations: run.outcome.stats.migrations,
        restarts: run.outcome.stats.restarts,
        dropped: run.outcome.dropped.len(),
        failed_servers: event.failed.len(),
    })
}

// ---------------------------------------------------------------------------
// Scenarios

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub workload: GenSpec,
    pub servers: usize,
    pub server_capacity: f64,
    /// Pre-failure demand as a share of cluster capacity.
    pub load: f64,
    /// Largest replica as a share of one server.
    pub max_replica_share: f64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            workload: GenSpec::default(),
            servers: 1000,
            server_capacity: 64.0,
            load: 0.95,
            max_replica_share: 0.25,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub apps: Vec<Application>,
    /// Every replica placed, nothing failed.
    pub cluster: ClusterState,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        self.workload.validate()?;
        if self.servers == 0 || !(self.server_capacity > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "servers = {}, server_capacity = {} (both must be positive)",
                self.servers, self.server_capacity
            )));
        }
        if !(self.load > 0.0 && self.load <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "load = {} (must be in (0, 1])",
                self.load
            )));
        }
        if !(self.max_replica_share > 0.0 && self.max_replica_share <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "max_replica_share = {} (must be in (0, 1])",
                self.max_replica_share
            )));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Scenario> {
        self.validate()?;
        let apps = generate_workload(&self.workload)?;
        let cluster = ClusterState::uniform(self.servers, self.server_capacity);
        let apps = fit_to_cluster(apps, &cluster, self.load, self.max_replica_share)?;
        let cluster = initial_placement(&apps, &cluster)?;
        Ok(Scenario { apps, cluster })
    }
}

/// A desk-scale instance for exact comparisons: `apps` applications of
/// `per_app` microservices each on `servers` servers of capacity 8, loaded to
/// 75% with replicas up to half a server.
pub fn small_instance(seed: u64, apps: usize, per_app: usize, servers: usize) -> Result<Scenario> {
    ScenarioSpec {
        workload: GenSpec {
            seed,
            apps,
            min_size: per_app,
            max_size: per_app,
            long_tailed: false,
            pin_largest: false,
            ..GenSpec::default()
        },
        servers,
        server_capacity: 8.0,
        load: 0.75,
        max_replica_share: 0.5,
    }
    .build()
}

/// Rescales demands so the workload needs `load` of the cluster, and splits
/// microservices into replicas no larger than `max_replica_share` of the
/// smallest server.
pub fn fit_to_cluster(
    mut apps: Vec<Application>,
    cluster: &ClusterState,
    load: f64,
    max_replica_share: f64,
) -> Result<Vec<Application>> {
    let total: f64 = apps.iter().map(Application::total_demand).sum();
    if total <= 0.0 {
        return Ok(apps);
    }
    let factor = load * cluster.total_capacity() / total;
    let smallest = cluster
        .servers()
        .iter()
        .map(|s| s.capacity)
        .fold(f64::INFINITY, f64::min);
    let largest_replica = max_replica_share * smallest;
    for app in &mut apps {
        for i in 0..app.len() {
            let demand = app.microservice(i).demand * factor;
            app.set_demand(i, demand)?;
            let replicas = ((demand / largest_replica).ceil() as u32).max(1);
            app.set_replicas(i, replicas)?;
        }
    }
    Ok(apps)
}

/// Places every unplaced replica with best-fit decreasing: largest replicas
/// first, each onto the healthy server with the least remaining capacity that
/// still fits it (ties to the lower index).
pub fn initial_placement(apps: &[Application], cluster: &ClusterState) -> Result<ClusterState> {
    let mut state = cluster.clone();
    let mut pending: Vec<(f64, ReplicaKey)> = apps
        .iter()
        .flat_map(|app| {
            app.microservices().iter().flat_map(move |ms| {
                (0..ms.replicas).map(move |r| (ms.per_replica_demand(), ReplicaKey::new(app.id(), &ms.id, r)))
            })
        })
        .filter(|(_, key)| state.placement(key).is_none())
        .collect();
    pending.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    let mut free: BTreeSet<(OrderedFloat<f64>, usize)> = (0..state.server_count())
        .filter(|&s| state.servers()[s].healthy)
        .map(|s| (OrderedFloat(state.remaining(s)), s))
        .collect();
    for (per, key) in pending {
        let Some(&(rem, s)) = free.range((OrderedFloat(per - crate::model::EPS), 0)..).next() else {
            return Err(Error::InvalidConfig(format!(
                "initial placement: {key} (demand {per}) fits on no server"
            )));
        };
        free.remove(&(rem, s));
        state.place(key, s, per)?;
        free.insert((OrderedFloat(state.remaining(s)), s));
    }
    Ok(state)
}

// ---------------------------------------------------------------------------
// Sweeps

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub scenario: ScenarioSpec,
    pub failure_fracs: Vec<f64>,
    pub schemes: Vec<SchemeSpec>,
    /// Each seed generates its own workload and failure pattern.
    pub seeds: Vec<u64>,
    /// Fill the timing columns (makes the CSV machine dependent).
    pub timings: bool,
    pub options: SchemeOptions,
    pub execution: Execution,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            scenario: ScenarioSpec::default(),
            failure_fracs: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            schemes: SchemeSpec::ALL.to_vec(),
            seeds: vec![1, 2, 3, 4, 5],
            timings: false,
            options: SchemeOptions::default(),
            execution: Execution::Parallel,
        }
    }
}

/// Results in (seed, failure fraction, scheme) order regardless of execution
/// mode.
pub fn sweep(config: &SweepConfig) -> Result<Vec<EpisodeResult>> {
    config.scenario.validate()?;
    if let Some(f) = config.failure_fracs.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Error::InvalidConfig(format!("failure fraction {f} is outside [0, 1]")));
    }
    let scenarios: Vec<(u64, Scenario, Reference)> = par::map(config.execution, &config.seeds, |&seed| {
        let mut spec = config.scenario.clone();
        spec.workload.seed = seed;
        spec.build().map(|s| {
            let reference = Reference::of(&s.apps, &s.cluster);
            (seed, s, reference)
        })
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let mut trials = Vec::new();
    for (i, _) in scenarios.iter().enumerate() {
        for &f in &config.failure_fracs {
            for &scheme in &config.schemes {
                trials.push((i, f, scheme));
            }
        }
    }
    par::map(config.execution, &trials, |&(i, f, scheme)| {
        let (seed, scenario, reference) = &scenarios[i];
        run_episode_with_reference(
            &scenario.apps,
            &scenario.cluster,
            *reference,
            f,
            scheme,
            *seed,
            config.options,
        )
    })
    .into_iter()
    .collect()
}

pub const SWEEP_COLUMNS: [&str; 15] = [
    "scheme",
    "objective",
    "failure_frac",
    "seed",
    "avail",
    "revenue",
    "pos_dev",
    "neg_dev",
    "util",
    "plan_ms",
    "sched_ms",
    "deletes",
    "migrations",
    "restarts",
    "dropped",
];

pub fn write_sweep_csv<W: Write>(results: &[EpisodeResult], timings: bool, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_COLUMNS)?;
    let num = |x: f64| format!("{x:.6}");
    for r in results {
        let timing = |ms: f64| if timings { format!("{ms:.3}") } else { String::new() };
        w.write_record([
            r.scheme.as_str().to_string(),
            r.objective.map(|o| o.as_str().to_string()).unwrap_or_default(),
            format!("{}", r.failure_frac),
            r.seed.to_string(),
            num(r.avail),
            num(r.revenue),
            num(r.pos_dev),
            num(r.neg_dev),
            num(r.util),
            timing(r.plan_ms),
            timing(r.sched_ms),
            r.deletes.to_string(),
            r.migrations.to_string(),
            r.restarts.to_string(),
            r.dropped.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean of `metric` per (scheme, failure fraction) over seeds.
pub fn mean_by_point(
    results: &[EpisodeResult],
    metric: impl Fn(&EpisodeResult) -> f64,
) -> BTreeMap<(SchemeSpec, OrderedFloat<f64>), f64> {
    let mut acc: BTreeMap<(SchemeSpec, OrderedFloat<f64>), (f64, usize)> = BTreeMap::new();
    for r in results {
        let e = acc.entry((r.scheme_spec(), OrderedFloat(r.failure_frac))).or_default();
        e.0 += metric(r);
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

// ---------------------------------------------------------------------------
// Trace replay

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub t_seconds: f64,
    pub capacity_fraction: f64,
}

pub fn load_trace<R: Read>(source: R) -> Result<Vec<TracePoint>> {
    let mut reader = csv::Reader::from_reader(source);
    let mut points: Vec<TracePoint> = Vec::new();
    for row in reader.deserialize() {
        let p: TracePoint = row?;
        if !(0.0..=1.0).contains(&p.capacity_fraction) {
            return Err(Error::InvalidConfig(format!(
                "capacity_fraction {} at t={} is outside [0, 1]",
                p.capacity_fraction, p.t_seconds
            )));
        }
        if points.last().is_some_and(|q| q.t_seconds >= p.t_seconds) {
            return Err(Error::InvalidConfig(format!(
                "trace times must increase (t={})",
                p.t_seconds
            )));
        }
        points.push(p);
    }
    Ok(points)
}

pub fn write_trace<W: Write>(trace: &[TracePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in trace {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// Full capacity, a linear drop to `low` at the midpoint, a linear climb
/// back; `steps` intervals of `step_seconds` each.
pub fn v_trace(low: f64, steps: usize, step_seconds: f64) -> Vec<TracePoint> {
    let half = steps as f64 / 2.0;
    (0..=steps)
        .map(|i| {
            let depth = 1.0 - ((i as f64 - half).abs() / half);
            TracePoint {
                t_seconds: i as f64 * step_seconds,
                capacity_fraction: 1.0 - (1.0 - low) * depth,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayOptions {
    /// Time from a capacity change until the scheme reacts.
    pub detect_seconds: f64,
    /// Time for the reaction's actions to take effect.
    pub act_seconds: f64,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        ReplayOptions {
            detect_seconds: 15.0,
            act_seconds: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayPoint {
    pub t_seconds: f64,
    pub capacity_fraction: f64,
    pub avail: f64,
    pub revenue: f64,
    /// Served request weight right after the change, before the reaction.
    pub served_before_reaction: u64,
    /// Served request weight once the reaction has taken effect.
    pub served: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayResult {
    pub scheme: SchemeSpec,
    pub points: Vec<ReplayPoint>,
    /// Served request weight integrated over the trace (weight x seconds).
    pub cumulative_served: f64,
}

pub fn replay_trace(
    apps: &[Application],
    cluster: &ClusterState,
    trace: &[TracePoint],
    scheme: SchemeSpec,
    seed: u64,
    options: SchemeOptions,
    replay: ReplayOptions,
) -> Result<ReplayResult> {
    let reference = Reference::of(apps, cluster);
    let mut state = cluster.clone();
    let mut failed: BTreeSet<usize> = BTreeSet::new();
    let mut points = Vec::with_capacity(trace.len());
    let mut cumulative = 0.0;
    let delay = replay.detect_seconds + replay.act_seconds;
    for (k, p) in trace.iter().enumerate() {
        let target: BTreeSet<usize> = failure_set(cluster, 1.0 - p.capacity_fraction, seed)
            .into_iter()
            .collect();
        let newly: Vec<usize> = target.difference(&failed).copied().collect();
        state.fail_servers(&newly);
        for &s in failed.difference(&target) {
            state.revive_server(s);
        }
        failed = target;
        let before = served_weight(apps, &state);
        let run = run_scheme(apps, &state, scheme, options);
        state = run.outcome.state;
        state.validate_against(apps)?;
        let (_, avail, _, _, rev) = measure(apps, &state, reference);
        let after = served_weight(apps, &state);
        if let Some(next) = trace.get(k + 1) {
            let span = next.t_seconds - p.t_seconds;
            let lag = delay.min(span);
            cumulative += before as f64 * lag + after as f64 * (span - lag);
        }
        points.push(ReplayPoint {
            t_seconds: p.t_seconds,
            capacity_fraction: p.capacity_fraction,
            avail,
            revenue: rev,
            served_before_reaction: before,
            served: after,
        });
    }
    Ok(ReplayResult {
        scheme,
        points,
        cumulative_served: cumulative,
    })
}

pub fn write_replay_csv<W: Write>(result: &ReplayResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "t_seconds",
        "capacity_fraction",
        "avail",
        "revenue",
        "served_before_reaction",
        "served",
    ])?;
    for p in &result.points {
        w.write_record([
            format!("{}", p.t_seconds),
            format!("{:.6}", p.capacity_fraction),
            format!("{:.6}", p.avail),
            format!("{:.6}", p.revenue),
            p.served_before_reaction.to_string(),
            p.served.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Scaling benchmark

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub nodes: Vec<usize>,
    /// Server size, load and workload shared by every cluster size.
    pub scenario: ScenarioSpec,
    pub failure_fracs: Vec<f64>,
    pub schemes: Vec<SchemeSpec>,
    pub seed: u64,
    pub options: SchemeOptions,
    pub budget: OracleBudget,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            nodes: vec![1_000, 10_000, 100_000],
            scenario: ScenarioSpec::default(),
            failure_fracs: vec![0.1, 0.5, 0.9],
            schemes: vec![SchemeSpec::DIAGONAL_COST, SchemeSpec::DIAGONAL_FAIR],
            seed: 1,
            options: SchemeOptions::default(),
            budget: OracleBudget::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub nodes: usize,
    pub microservices: usize,
    pub replicas: usize,
    pub scheme: SchemeSpec,
    pub failure_frac: f64,
    pub build_ms: f64,
    pub plan_ms: f64,
    pub sched_ms: f64,
    /// Only when the degraded instance fits the oracle budget.
    pub oracle_ms: Option<f64>,
}

impl BenchRow {
    pub fn total_ms(&self) -> f64 {
        self.plan_ms + self.sched_ms
    }
}

/// Times planning and scheduling on one generated workload fitted to each
/// cluster size. Runs sequentially so the timings do not compete.
pub fn bench(config: &BenchConfig) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &nodes in &config.nodes {
        let started = Instant::now();
        let spec = ScenarioSpec {
            servers: nodes,
            workload: GenSpec {
                seed: config.seed,
                ..config.scenario.workload.clone()
            },
            ..config.scenario.clone()
        };
        let scenario = spec.build()?;
        let build_ms = started.elapsed().as_secs_f64() * 1e3;
        let microservices = scenario.apps.iter().map(Application::len).sum();
        let replicas = scenario.cluster.assignment().len();
        for &f in &config.failure_fracs {
            for &scheme in &config.schemes {
                let r = run_episode(
                    &scenario.apps,
                    &scenario.cluster,
                    f,
                    scheme,
                    config.seed,
                    config.options,
                )?;
                let oracle_ms = match scheme.objective {
                    Some(objective) if microservices <= config.budget.max_microservices => {
                        let (state, _) = inject_failure(&scenario.cluster, f, config.seed);
                        match solve_exact(&scenario.apps, &state, objective, config.budget) {
                            Ok(solution) => Some(solution.solve_ms),
                            Err(Error::BudgetExceeded(_)) => None,
                            Err(e) => return Err(e),
                        }
                    }
                    _ => None,
                };
                rows.push(BenchRow {
                    nodes,
                    microservices,
                    replicas,
                    scheme,
                    failure_frac: f,
                    build_ms,
                    plan_ms: r.plan_ms,
                    sched_ms: r.sched_ms,
                    oracle_ms,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_bench_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "nodes",
        "microservices",
        "replicas",
        "scheme",
        "failure_frac",
        "build_ms",
        "plan_ms",
        "sched_ms",
        "total_ms",
        "oracle_ms",
    ])?;
    for r in rows {
        w.write_record([
            r.nodes.to_string(),
            r.microservices.to_string(),
            r.replicas.to_string(),
            r.scheme.to_string(),
            r.failure_frac.to_string(),
            format!("{:.3}", r.build_ms),
            format!("{:.3}", r.plan_ms),
            format!("{:.3}", r.sched_ms),
            format!("{:.3}", r.total_ms()),
            r.oracle_ms.map(|ms| format!("{ms:.3}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Least-squares slope of log(y) against log(x).
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AppSpec;

    fn tiny() -> (Vec<Application>, ClusterState) {
        let mut a = AppSpec::new("a", 2.0)
            .microservice("x", 4.0, 1)
            .microservice("y", 4.0, 2)
            .call_graph(&["x"], 3)
            .call_graph(&["x", "y"], 1)
            .build()
            .unwrap();
        a.set_replicas(1, 2).unwrap();
        let apps = vec![a, AppSpec::new("b", 1.0).microservice("z", 4.0, 1).build().unwrap()];
        let cluster = initial_placement(&apps, &ClusterState::uniform(4, 4.0)).unwrap();
        (apps, cluster)
    }

    #[test]
    fn injection_edges() {
        let cluster = ClusterState::uniform(100, 1.0);
        assert!(inject_failure(&cluster, 0.0, 1).1.failed.is_empty());
        let (state, _) = inject_failure(&cluster, 1.0, 1);
        assert_eq!(state.healthy_capacity(), 0.0);
        let (state, event) = inject_failure(&cluster, 0.5, 9);
        assert_eq!(event.failed.len(), 50);
        assert_eq!(state.healthy_capacity(), 50.0);
        let small: BTreeSet<usize> = failure_set(&cluster, 0.2, 3).into_iter().collect();
        let large: BTreeSet<usize> = failure_set(&cluster, 0.6, 3).into_iter().collect();
        assert!(small.is_subset(&large));
    }

    #[test]
    fn full_assignment_metrics() {
        let (apps, cluster) = tiny();
        assert_eq!(critical_availability(&apps, &cluster).mean, 1.0);
        assert_eq!(revenue(&apps, &cluster), 2.0 * 8.0 + 4.0);
        let empty = ClusterState::uniform(4, 4.0);
        assert_eq!(revenue(&apps, &empty), 0.0);
        assert_eq!(critical_availability(&apps, &empty).mean, 0.0);
    }

    #[test]
    fn hoarding_deviation_is_symmetric() {
        let apps: Vec<Application> = ["a", "b"]
            .iter()
            .map(|id| AppSpec::new(*id, 1.0).microservice("m", 4.0, 1).build().unwrap())
            .collect();
        let mut state = ClusterState::uniform(1, 4.0);
        state.place(ReplicaKey::new("a", "m", 0), 0, 4.0).unwrap();
        let (pos, neg) = fairness_deviation(&apps, &state, 4.0);
        assert!((pos - 0.5).abs() < 1e-12 && (neg - 0.5).abs() < 1e-12);
    }

    #[test]
    fn no_failure_episode_is_perfect() {
        let (apps, cluster) = tiny();
        for scheme in SchemeSpec::ALL {
            let r = run_episode(&apps, &cluster, 0.0, scheme, 1, SchemeOptions::default()).unwrap();
            assert_eq!((r.avail, r.revenue), (1.0, 1.0), "{scheme}");
            assert_eq!(r.deletes + r.migrations + r.restarts, 0, "{scheme}");
        }
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in SchemeSpec::ALL {
            assert_eq!(s.to_string().parse::<SchemeSpec>().unwrap(), s);
        }
        assert!("diagonal".parse::<SchemeSpec>().is_err());
        assert!("fair-cost".parse::<SchemeSpec>().is_err());
    }

    #[test]
    fn constant_trace_is_flat() {
        let (apps, cluster) = tiny();
        let trace: Vec<TracePoint> = (0..4)
            .map(|i| TracePoint {
                t_seconds: i as f64 * 60.0,
                capacity_fraction: 0.5,
            })
            .collect();
        let r = replay_trace(
            &apps,
            &cluster,
            &trace,
            SchemeSpec::DIAGONAL_COST,
            1,
            Default::default(),
            Default::default(),
        )
        .unwrap();
        let served: Vec<u64> = r.points.iter().map(|p| p.served).collect();
        assert!(served.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn trace_csv_round_trip() {
        let trace = v_trace(0.4, 10, 30.0);
        assert_eq!(trace[5].capacity_fraction, 0.4);
        assert_eq!(trace[0].capacity_fraction, 1.0);
        let mut buf = Vec::new();
        write_trace(&trace, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("t_seconds,capacity_fraction\n"));
        assert_eq!(load_trace(buf.as_slice()).unwrap(), trace);
        assert!(load_trace("t_seconds,capacity_fraction\n0,1.5\n".as_bytes()).is_err());
    }

    #[test]
    fn slope_recovers_power_law_exponent() {
        let points: Vec<(f64, f64)> = [1e3, 1e4, 1e5].iter().map(|&x: &f64| (x, 3.0 * x.powf(1.25))).collect();
        assert!((log_log_slope(&points) - 1.25).abs() < 1e-12);
    }

    #[test]
    fn small_instances_are_uniform_and_placed() {
        let s = small_instance(7, 2, 5, 4).unwrap();
        assert_eq!(s.apps.len(), 2);
        assert!(s.apps.iter().all(|a| a.len() == 5));
        let replicas: u32 = s
            .apps
            .iter()
            .flat_map(|a| a.microservices().iter().map(|m| m.replicas))
            .sum();
        assert_eq!(s.cluster.assignment().len(), replicas as usize);
        assert_eq!(s.cluster.server_count(), 4);
    }

    #[test]
    fn bench_reports_one_row_per_combination() {
        let config = BenchConfig {
            nodes: vec![10, 20],
            failure_fracs: vec![0.5],
            ..BenchConfig::default()
        };
        let rows = bench(&config).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.total_ms() >= r.plan_ms && r.oracle_ms.is_none()));
    }
}
