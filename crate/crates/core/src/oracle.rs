//! Exact reference solvers for small instances: optimal activation and
//! placement by branch-and-bound, exact and greedy call-graph coverage, and
//! a validator for the activation/placement constraints shared with the
//! heuristic.
//!
//! Constraints on an activation `x` and placement `y`:
//! - within an application, a microservice may only be active if every
//!   strictly more critical microservice of that application is active;
//! - an active non-source microservice needs an active caller (only for
//!   applications with a dependency graph);
//! - every replica of an active microservice sits on exactly one healthy
//!   server, and inactive microservices have none;
//! - no server exceeds its capacity.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Application, ClusterState, Criticality, ReplicaKey, EPS};
use crate::planner::{app_demands, compute_water_fill, Objective};

const TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleBudget {
    pub max_microservices: usize,
    pub max_servers: usize,
    pub max_coverage_candidates: usize,
}

impl Default for OracleBudget {
    fn default() -> Self {
        OracleBudget {
            max_microservices: 16,
            max_servers: 8,
            max_coverage_candidates: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActiveMicroservice {
    pub app: String,
    pub microservice: String,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PlacedReplica {
    pub app: String,
    pub microservice: String,
    pub replica: u32,
    pub server: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactSolution {
    pub objective: Objective,
    /// Revenue for `cost`, the guaranteed per-application floor for `fair`.
    pub value: f64,
    pub activated_demand: f64,
    pub activation: Vec<ActiveMicroservice>,
    pub placement: Vec<PlacedReplica>,
    pub allocations: BTreeMap<String, f64>,
    pub solve_ms: f64,
    pub nodes: u64,
}

impl ExactSolution {
    /// The solution's placement applied to an emptied copy of `cluster`.
    pub fn to_state(&self, cluster: &ClusterState, apps: &[Application]) -> Result<ClusterState> {
        let mut state = ClusterState::new(cluster.servers().to_vec())?;
        let per_replica: HashMap<(&str, &str), f64> = apps
            .iter()
            .flat_map(|a| {
                a.microservices()
                    .iter()
                    .map(move |m| ((a.id(), m.id.as_str()), m.per_replica_demand()))
            })
            .collect();
        for p in &self.placement {
            let server = state
                .server_index(&p.server)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown server `{}`", p.server)))?;
            let demand = per_replica[&(p.app.as_str(), p.microservice.as_str())];
            state.place(ReplicaKey::new(&p.app, &p.microservice, p.replica), server, demand)?;
        }
        Ok(state)
    }
}

// ---------------------------------------------------------------------------
// Constraint validator

#[derive(Clone, Debug, PartialEq)]
pub enum ConstraintViolation {
    /// `active` is on while the more critical `inactive` is off.
    CriticalityOrder {
        app: String,
        active: String,
        inactive: String,
    },
    /// Active non-source microservice without an active caller.
    OrphanedCallee {
        app: String,
        microservice: String,
    },
    /// Some but not all replicas placed, or a replica the workload lacks.
    IncompletePlacement {
        app: String,
        microservice: String,
    },
    UnknownReplica {
        key: String,
    },
    Capacity {
        server: String,
        used: f64,
        capacity: f64,
    },
    UnhealthyHost {
        server: String,
        key: String,
    },
}

impl fmt::Display for ConstraintViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConstraintViolation::CriticalityOrder { app, active, inactive } => {
                write!(f, "{app}: `{active}` active while more critical `{inactive}` is not")
            }
            ConstraintViolation::OrphanedCallee { app, microservice } => {
                write!(f, "{app}: `{microservice}` active without an active caller")
            }
            ConstraintViolation::IncompletePlacement { app, microservice } => {
                write!(f, "{app}: `{microservice}` only partially placed")
            }
            ConstraintViolation::UnknownReplica { key } => write!(f, "replica {key} is not in the workload"),
            ConstraintViolation::Capacity { server, used, capacity } => {
                write!(f, "server `{server}` uses {used} of {capacity}")
            }
            ConstraintViolation::UnhealthyHost { server, key } => {
                write!(f, "replica {key} on failed server `{server}`")
            }
        }
    }
}

/// Active microservices per application (indices), derived from which
/// microservices have every replica placed.
pub fn active_sets(apps: &[Application], state: &ClusterState) -> Vec<Vec<bool>> {
    let running = state.running_replicas();
    apps.iter()
        .map(|a| {
            a.microservices()
                .iter()
                .map(|m| running.get(&(a.id(), m.id.as_str())).copied().unwrap_or(0) >= m.replicas)
                .collect()
        })
        .collect()
}

pub fn constraint_violations(apps: &[Application], state: &ClusterState) -> Vec<ConstraintViolation> {
    let mut out = Vec::new();
    let running = state.running_replicas();
    let known: HashMap<(&str, &str), u32> = apps
        .iter()
        .flat_map(|a| {
            a.microservices()
                .iter()
                .map(move |m| ((a.id(), m.id.as_str()), m.replicas))
        })
        .collect();
    for (key, p) in state.assignment() {
        match known.get(&(&*key.app, &*key.ms)) {
            Some(&n) if key.replica < n => {}
            _ => out.push(ConstraintViolation::UnknownReplica { key: key.to_string() }),
        }
        if !state.servers()[p.server].healthy {
            out.push(ConstraintViolation::UnhealthyHost {
                server: state.servers()[p.server].id.clone(),
                key: key.to_string(),
            });
        }
    }
    for (s, server) in state.servers().iter().enumerate() {
        if state.used(s) > server.capacity + EPS {
            out.push(ConstraintViolation::Capacity {
                server: server.id.clone(),
                used: state.used(s),
                capacity: server.capacity,
            });
        }
    }
    for app in apps {
        let ms = app.microservices();
        let count = |i: usize| running.get(&(app.id(), ms[i].id.as_str())).copied().unwrap_or(0);
        let active: Vec<bool> = (0..ms.len()).map(|i| count(i) >= ms[i].replicas).collect();
        for i in 0..ms.len() {
            let c = count(i);
            if c > 0 && c < ms[i].replicas {
                out.push(ConstraintViolation::IncompletePlacement {
                    app: app.id().to_string(),
                    microservice: ms[i].id.clone(),
                });
            }
        }
        // The most critical inactive microservice is the only witness needed.
        if let Some(k) = (0..ms.len()).filter(|&k| !active[k]).min_by_key(|&k| (ms[k].tag, k)) {
            for j in 0..ms.len() {
                if active[j] && ms[j].tag > ms[k].tag {
                    out.push(ConstraintViolation::CriticalityOrder {
                        app: app.id().to_string(),
                        active: ms[j].id.clone(),
                        inactive: ms[k].id.clone(),
                    });
                }
            }
        }
        if let Some(g) = app.graph() {
            for j in 0..ms.len() {
                if active[j] && !g.is_source(j) && !g.parents(j).iter().any(|&p| active[p]) {
                    out.push(ConstraintViolation::OrphanedCallee {
                        app: app.id().to_string(),
                        microservice: ms[j].id.clone(),
                    });
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Branch-and-bound

/// Interchangeable microservices of one application, decided as a count.
struct Item {
    app: usize,
    members: Vec<usize>,
    tag: Criticality,
    demand: f64,
    price: f64,
    last_of_app: bool,
}

struct Incumbent {
    value: f64,
    demand: f64,
    counts: Vec<usize>,
    bins: Vec<usize>,
}

struct Search<'a> {
    apps: &'a [Application],
    items: Vec<Item>,
    by_price: Vec<usize>,
    objective: Objective,
    shares: Vec<f64>,
    bins: Vec<f64>,
    capacity: f64,
    largest_bin: f64,
    counts: Vec<usize>,
    alloc: Vec<f64>,
    undecided: Vec<f64>,
    blocked: Vec<Option<Criticality>>,
    used: f64,
    value: f64,
    best: Option<Incumbent>,
    nodes: u64,
}

/// Optimal activation and placement of `apps` on the healthy servers of
/// `cluster` (its current assignment is ignored).
pub fn solve_exact(
    apps: &[Application],
    cluster: &ClusterState,
    objective: Objective,
    budget: OracleBudget,
) -> Result<ExactSolution> {
    let started = Instant::now();
    let total_ms: usize = apps.iter().map(Application::len).sum();
    if total_ms > budget.max_microservices {
        return Err(Error::BudgetExceeded(format!(
            "{total_ms} microservices (limit {})",
            budget.max_microservices
        )));
    }
    let healthy: Vec<usize> = (0..cluster.server_count())
        .filter(|&s| cluster.servers()[s].healthy)
        .collect();
    if healthy.len() > budget.max_servers {
        return Err(Error::BudgetExceeded(format!(
            "{} healthy servers (limit {})",
            healthy.len(),
            budget.max_servers
        )));
    }
    let bins: Vec<f64> = healthy.iter().map(|&s| cluster.servers()[s].capacity).collect();
    let capacity: f64 = bins.iter().sum();
    let shares = compute_water_fill(&app_demands(apps), capacity);

    let mut items = Vec::new();
    for (a, app) in apps.iter().enumerate() {
        let ms = app.microservices();
        let mut order: Vec<usize> = (0..ms.len()).collect();
        order.sort_by_key(|&i| (ms[i].tag, i));
        let start = items.len();
        for i in order {
            let m = &ms[i];
            let merge = app.graph().is_none()
                && items[start..].last().is_some_and(|it: &Item| {
                    let first = &ms[it.members[0]];
                    first.tag == m.tag && first.demand == m.demand && first.replicas == m.replicas
                });
            if merge {
                items.last_mut().expect("item").members.push(i);
            } else {
                items.push(Item {
                    app: a,
                    members: vec![i],
                    tag: m.tag,
                    demand: m.demand,
                    price: app.price_per_unit(),
                    last_of_app: false,
                });
            }
        }
        if let Some(last) = items[start..].last_mut() {
            last.last_of_app = true;
        }
    }
    let mut by_price: Vec<usize> = (0..items.len()).collect();
    by_price.sort_by(|&a, &b| items[b].price.total_cmp(&items[a].price).then(a.cmp(&b)));
    let mut undecided = vec![0.0; apps.len()];
    for it in &items {
        undecided[it.app] += it.demand * it.members.len() as f64;
    }

    let mut search = Search {
        apps,
        by_price,
        objective,
        shares: apps.iter().map(|a| shares.get(a.id())).collect(),
        largest_bin: bins.iter().copied().fold(0.0, f64::max),
        bins,
        capacity,
        counts: vec![0; items.len()],
        items,
        alloc: vec![0.0; apps.len()],
        undecided,
        blocked: vec![None; apps.len()],
        used: 0.0,
        value: 0.0,
        best: None,
        nodes: 0,
    };
    search.descend(0);
    let best = search.best.take().expect("the empty activation is always feasible");

    let mut activation = Vec::new();
    let mut placement = Vec::new();
    let mut allocations: BTreeMap<String, f64> = apps.iter().map(|a| (a.id().to_string(), 0.0)).collect();
    let mut replica_slot = 0;
    let replica_items = search.replica_list(&best.counts);
    for (it, &count) in search.items.iter().zip(&best.counts) {
        let app = &apps[it.app];
        for &m in &it.members[..count] {
            let ms = app.microservice(m);
            activation.push(ActiveMicroservice {
                app: app.id().to_string(),
                microservice: ms.id.clone(),
            });
            *allocations.get_mut(app.id()).expect("app") += ms.demand;
            for r in 0..ms.replicas {
                debug_assert_eq!(replica_items[replica_slot].1, (it.app, m, r));
                placement.push(PlacedReplica {
                    app: app.id().to_string(),
                    microservice: ms.id.clone(),
                    replica: r,
                    server: cluster.servers()[healthy[best.bins[replica_slot]]].id.clone(),
                });
                replica_slot += 1;
            }
        }
    }
    activation.sort();
    placement.sort();
    Ok(ExactSolution {
        objective,
        value: best.value,
        activated_demand: best.demand,
        activation,
        placement,
        allocations,
        solve_ms: started.elapsed().as_secs_f64() * 1e3,
        nodes: search.nodes,
    })
}

impl Search<'_> {
    fn better(&self, value: f64, demand: f64) -> bool {
        match &self.best {
            None => true,
            Some(b) => value > b.value + TOL || (value > b.value - TOL && demand > b.demand + TOL),
        }
    }

    fn objective_value(&self) -> f64 {
        match self.objective {
            Objective::Cost => self.value,
            Objective::Fair => self.alloc.iter().copied().fold(f64::INFINITY, f64::min).min(f64::MAX),
        }
    }

    /// Optimistic (value, demand) reachable from the current partial
    /// assignment, with items before `next` decided.
    fn bound(&self, next: usize) -> (f64, f64) {
        let room = (self.capacity - self.used).max(0.0);
        match self.objective {
            Objective::Cost => {
                let mut left = room;
                let mut value = self.value;
                for &i in &self.by_price {
                    if i < next || left <= 0.0 {
                        continue;
                    }
                    let it = &self.items[i];
                    let take = (it.demand * it.members.len() as f64).min(left);
                    value += take * it.price;
                    left -= take;
                }
                let rest: f64 = self.undecided.iter().sum();
                (value, self.used + rest.min(room))
            }
            Objective::Fair => {
                let mut floor = f64::INFINITY;
                let mut reach = 0.0;
                for a in 0..self.alloc.len() {
                    let top = (self.alloc[a] + self.undecided[a]).min(self.shares[a] + EPS);
                    floor = floor.min(top);
                    reach += top.max(self.alloc[a]) - self.alloc[a];
                }
                (floor.min(f64::MAX), self.used + reach.min(room))
            }
        }
    }

    fn descend(&mut self, next: usize) {
        self.nodes += 1;
        if next == self.items.len() {
            let (value, demand) = (self.objective_value(), self.used);
            if self.better(value, demand) {
                if let Some(bins) = self.pack() {
                    self.best = Some(Incumbent {
                        value,
                        demand,
                        counts: self.counts.clone(),
                        bins,
                    });
                }
            }
            return;
        }
        if self.best.is_some() {
            let (value, demand) = self.bound(next);
            if !self.better(value, demand) {
                return;
            }
        }
        let (app, n, tag, unit, price, last) = {
            let it = &self.items[next];
            (it.app, it.members.len(), it.tag, it.demand, it.price, it.last_of_app)
        };
        let forced_off = self.blocked[app].is_some_and(|b| tag > b);
        let per_replica_ok = {
            let m = self.apps[app].microservice(self.items[next].members[0]);
            m.per_replica_demand() <= self.largest_bin + EPS
        };
        let mut top = if forced_off || !per_replica_ok { 0 } else { n };
        // Capacity and fair-share ceilings.
        while top > 0 {
            let add = unit * top as f64;
            let fits = self.used + add <= self.capacity + EPS;
            let within_share = self.objective == Objective::Cost || self.alloc[app] + add <= self.shares[app] + EPS;
            if fits && within_share {
                break;
            }
            top -= 1;
        }
        self.undecided[app] -= unit * n as f64;
        let saved_block = self.blocked[app];
        for count in (0..=top).rev() {
            let add = unit * count as f64;
            self.counts[next] = count;
            self.used += add;
            self.alloc[app] += add;
            self.value += add * price;
            if count < n {
                self.blocked[app] = Some(saved_block.map_or(tag, |b| b.min(tag)));
            }
            if !last || self.dependencies_hold(app) {
                self.descend(next + 1);
            }
            self.blocked[app] = saved_block;
            self.used -= add;
            self.alloc[app] -= add;
            self.value -= add * price;
        }
        self.counts[next] = 0;
        self.undecided[app] += unit * n as f64;
    }

    fn dependencies_hold(&self, app: usize) -> bool {
        let Some(graph) = self.apps[app].graph() else {
            return true;
        };
        let mut active = vec![false; self.apps[app].len()];
        for (it, &c) in self.items.iter().zip(&self.counts) {
            if it.app == app {
                for &m in &it.members[..c] {
                    active[m] = true;
                }
            }
        }
        (0..active.len()).all(|j| !active[j] || graph.is_source(j) || graph.parents(j).iter().any(|&p| active[p]))
    }

    /// Replica demands of the chosen counts, tagged with (app, ms, replica),
    /// in solution order.
    fn replica_list(&self, counts: &[usize]) -> Vec<(f64, (usize, usize, u32))> {
        let mut out = Vec::new();
        for (it, &c) in self.items.iter().zip(counts) {
            for &m in &it.members[..c] {
                let ms = self.apps[it.app].microservice(m);
                for r in 0..ms.replicas {
                    out.push((ms.per_replica_demand(), (it.app, m, r)));
                }
            }
        }
        out
    }

    fn pack(&self) -> Option<Vec<usize>> {
        let demands: Vec<f64> = self.replica_list(&self.counts).into_iter().map(|(d, _)| d).collect();
        pack_items(&demands, &self.bins)
    }
}

/// Bin assignment for `items` within `bins`: first-fit decreasing, then an
/// exhaustive search if that fails.
pub fn pack_items(items: &[f64], bins: &[f64]) -> Option<Vec<usize>> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[b].total_cmp(&items[a]).then(a.cmp(&b)));
    let mut left = bins.to_vec();
    let mut assign = vec![usize::MAX; items.len()];
    let greedy = order
        .iter()
        .all(|&i| match left.iter().position(|&r| r >= items[i] - EPS) {
            Some(b) => {
                left[b] -= items[i];
                assign[i] = b;
                true
            }
            None => false,
        });
    if greedy {
        return Some(assign);
    }
    let total: f64 = items.iter().sum();
    if total > bins.iter().sum::<f64>() + EPS {
        return None;
    }
    let mut left = bins.to_vec();
    let mut suffix = vec![0.0; order.len() + 1];
    for k in (0..order.len()).rev() {
        suffix[k] = suffix[k + 1] + items[order[k]];
    }
    struct Exact<'a> {
        order: &'a [usize],
        items: &'a [f64],
        suffix: Vec<f64>,
        /// Residual multisets (at a depth) already shown to be dead ends.
        dead: HashSet<(usize, Vec<i64>)>,
    }
    impl Exact<'_> {
        fn place(&mut self, k: usize, left: &mut [f64], assign: &mut [usize]) -> bool {
            if k == self.order.len() {
                return true;
            }
            // Space smaller than the smallest remaining item is wasted.
            let smallest = self.items[*self.order.last().expect("nonempty")];
            let usable: f64 = left.iter().filter(|&&r| r >= smallest - EPS).sum();
            if usable + EPS < self.suffix[k] {
                return false;
            }
            let mut key: Vec<i64> = left.iter().map(|&r| (r / EPS).round() as i64).collect();
            key.sort_unstable();
            if self.dead.contains(&(k, key.clone())) {
                return false;
            }
            let d = self.items[self.order[k]];
            for b in 0..left.len() {
                if left[b] < d - EPS || left[..b].iter().any(|&r| (r - left[b]).abs() <= EPS) {
                    continue;
                }
                left[b] -= d;
                assign[self.order[k]] = b;
                if self.place(k + 1, left, assign) {
                    return true;
                }
                left[b] += d;
            }
            self.dead.insert((k, key));
            false
        }
    }
    let mut exact = Exact {
        order: &order,
        items,
        suffix,
        dead: HashSet::new(),
    };
    exact.place(0, &mut left, &mut assign).then_some(assign)
}

// ---------------------------------------------------------------------------
// Call-graph coverage

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coverage {
    /// Microservice indices, ascending.
    pub members: Vec<usize>,
    pub weight: u64,
}

/// Total weight of call graphs whose members are all in `active`.
pub fn covered_weight(app: &Application, active: &[bool]) -> u64 {
    app.call_graphs()
        .unwrap_or(&[])
        .iter()
        .filter(|cg| cg.members.iter().all(|&m| active[m]))
        .map(|cg| cg.weight)
        .sum()
}

/// The at most `k` microservices that fully cover the most call-graph weight.
/// Ties prefer fewer microservices, then the lexicographically smallest set.
pub fn solve_coverage(app: &Application, k: usize, budget: OracleBudget) -> Result<Coverage> {
    let graphs = app.call_graphs().unwrap_or(&[]);
    let mut candidates: Vec<usize> = graphs.iter().flat_map(|cg| cg.members.iter().copied()).collect();
    candidates.sort_unstable();
    candidates.dedup();
    if candidates.len() > budget.max_coverage_candidates {
        return Err(Error::BudgetExceeded(format!(
            "{} coverage candidates (limit {})",
            candidates.len(),
            budget.max_coverage_candidates
        )));
    }
    struct Cover<'a> {
        graphs: &'a [crate::model::CallGraph],
        candidates: Vec<usize>,
        chosen: Vec<bool>,
        size: usize,
        k: usize,
        best: (u64, usize, Vec<usize>),
    }
    impl Cover<'_> {
        fn weight(&self, optimistic_from: Option<usize>) -> u64 {
            self.graphs
                .iter()
                .filter(|cg| {
                    let mut missing = 0;
                    for m in &cg.members {
                        if self.chosen[*m] {
                            continue;
                        }
                        match optimistic_from {
                            Some(from) if self.candidates[from..].binary_search(m).is_ok() => missing += 1,
                            _ => return false,
                        }
                    }
                    missing <= self.k - self.size
                })
                .map(|cg| cg.weight)
                .sum()
        }

        fn go(&mut self, next: usize) {
            // Include-first over ascending candidates meets equal-size sets in
            // lexicographic order, so only strict improvements replace.
            let reach = self.weight(Some(next));
            if reach < self.best.0 || (reach == self.best.0 && self.size >= self.best.1) {
                return;
            }
            let here = self.weight(None);
            if here > self.best.0 || (here == self.best.0 && self.size < self.best.1) {
                let set = (0..self.chosen.len()).filter(|&m| self.chosen[m]).collect();
                self.best = (here, self.size, set);
            }
            if next == self.candidates.len() || self.size == self.k {
                return;
            }
            let m = self.candidates[next];
            self.chosen[m] = true;
            self.size += 1;
            self.go(next + 1);
            self.chosen[m] = false;
            self.size -= 1;
            self.go(next + 1);
        }
    }
    let mut cover = Cover {
        graphs,
        candidates,
        chosen: vec![false; app.len()],
        size: 0,
        k,
        best: (0, 0, Vec::new()),
    };
    cover.go(0);
    Ok(Coverage {
        members: cover.best.2,
        weight: cover.best.0,
    })
}

/// Greedy coverage within `k` microservices.
pub fn greedy_coverage(app: &Application, k: usize) -> Coverage {
    let mut trajectory = coverage_trajectory(app, k);
    trajectory.pop().unwrap_or(Coverage {
        members: Vec::new(),
        weight: 0,
    })
}

/// Greedy coverage states after each completion step, starting from the
/// empty set. Each step completes the call graph with the highest weight per
/// missing microservice (ties: fewer missing, then lower call-graph index),
/// never exceeding `k` microservices in total.
pub fn coverage_trajectory(app: &Application, k: usize) -> Vec<Coverage> {
    let graphs = app.call_graphs().unwrap_or(&[]);
    let mut containing: Vec<Vec<usize>> = vec![Vec::new(); app.len()];
    for (g, cg) in graphs.iter().enumerate() {
        for &m in &cg.members {
            containing[m].push(g);
        }
    }
    let mut missing: Vec<usize> = graphs.iter().map(|cg| cg.members.len()).collect();
    let mut chosen = vec![false; app.len()];
    let mut size = 0;
    let mut weight: u64 = graphs
        .iter()
        .filter(|cg| cg.members.is_empty())
        .map(|cg| cg.weight)
        .sum();
    let mut trajectory = vec![Coverage {
        members: Vec::new(),
        weight,
    }];
    loop {
        let mut pick: Option<usize> = None;
        for g in 0..graphs.len() {
            if missing[g] == 0 || missing[g] > k - size {
                continue;
            }
            let better = match pick {
                None => true,
                Some(p) => {
                    // w_g / m_g > w_p / m_p, compared without division.
                    let lhs = graphs[g].weight as u128 * missing[p] as u128;
                    let rhs = graphs[p].weight as u128 * missing[g] as u128;
                    lhs > rhs || (lhs == rhs && missing[g] < missing[p])
                }
            };
            if better {
                pick = Some(g);
            }
        }
        let Some(g) = pick else { break };
        for &m in &graphs[g].members {
            if chosen[m] {
                continue;
            }
            chosen[m] = true;
            size += 1;
            for &h in &containing[m] {
                missing[h] -= 1;
                if missing[h] == 0 {
                    weight += graphs[h].weight;
                }
            }
        }
        trajectory.push(Coverage {
            members: (0..chosen.len()).filter(|&m| chosen[m]).collect(),
            weight,
        });
    }
    trajectory
}
