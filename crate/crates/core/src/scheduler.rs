//! Maps an activation plan onto healthy servers.
//!
//! Each unplaced replica tries, in order: best-fit, repacking a server by
//! migrating some of its residents elsewhere, and deleting lower-ranked
//! microservices. A microservice whose replicas cannot all be placed is
//! dropped together with everything ranked below it. Work happens on a
//! private index-based copy; the result is reported as a new state plus the
//! delete/migrate/restart diff an agent would execute.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use ordered_float::OrderedFloat;
use serde::{Deserialize, Serialize};

use crate::model::{Application, ClusterState, ReplicaKey, EPS};
use crate::planner::ActivationPlan;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeletionMode {
    /// After each deletion only the servers it freed are checked.
    #[default]
    LatestFreed,
    /// After each deletion best-fit runs over the whole cluster again.
    GlobalRetry,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerOptions {
    #[serde(default)]
    pub deletion: DeletionMode,
    /// Upper bound on servers whose evacuation is attempted per repack call.
    /// `None` scans every healthy server.
    #[serde(default)]
    pub repack_scan_limit: Option<usize>,
}

impl Default for SchedulerOptions {
    fn default() -> Self {
        SchedulerOptions {
            deletion: DeletionMode::LatestFreed,
            repack_scan_limit: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ActionKind {
    Delete,
    Migrate,
    Restart,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub kind: ActionKind,
    pub app: String,
    pub microservice: String,
    pub replica: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub from: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub to: Option<String>,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let subject = format!("{}/{}#{}", self.app, self.microservice, self.replica);
        match (self.kind, &self.from, &self.to) {
            (ActionKind::Delete, Some(from), _) => write!(f, "delete {subject} from {from}"),
            (ActionKind::Migrate, Some(from), Some(to)) => write!(f, "migrate {subject} {from} -> {to}"),
            (ActionKind::Restart, _, Some(to)) => write!(f, "restart {subject} on {to}"),
            _ => write!(f, "{:?} {subject}", self.kind),
        }
    }
}

/// One action per line, for the `explain` subcommand.
pub fn actions_to_json_lines(actions: &[Action]) -> String {
    let mut out = String::new();
    for a in actions {
        out.push_str(&serde_json::to_string(a).expect("action serializes"));
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PackingStats {
    pub placed_best_fit: usize,
    pub placed_after_repack: usize,
    pub placed_after_delete: usize,
    pub passes: usize,
    pub deletes: usize,
    pub migrations: usize,
    pub restarts: usize,
}

#[derive(Clone, Debug)]
pub struct PackingOutcome {
    pub state: ClusterState,
    /// Planned microservices with every replica running, in plan order.
    pub scheduled: Vec<(String, String)>,
    /// Planned microservices left inactive, in plan order.
    pub dropped: Vec<(String, String)>,
    /// Deletions, then migrations, then restarts.
    pub actions: Vec<Action>,
    pub stats: PackingStats,
}

impl PackingOutcome {
    pub fn count(&self, kind: ActionKind) -> usize {
        self.actions.iter().filter(|a| a.kind == kind).count()
    }
}

/// Healthy server with the least remaining capacity that still fits
/// `demand`; ties go to the smaller id.
pub fn get_best_fit(demand: f64, state: &ClusterState) -> Option<usize> {
    (0..state.server_count())
        .filter(|&s| state.servers()[s].healthy && state.remaining(s) >= demand - EPS)
        .min_by(|&a, &b| state.remaining(a).total_cmp(&state.remaining(b)).then(a.cmp(&b)))
}

/// Frees room for `demand` by migrating residents off one server. On success
/// the migrations are applied to `state` and returned.
pub fn repack_to_fit(demand: f64, state: &mut ClusterState, options: SchedulerOptions) -> Option<(usize, Vec<Action>)> {
    let mut packer = Packer::new(state, &[], options);
    let server = packer.repack(demand)?;
    let actions = packer.write_back(state);
    Some((server as usize, actions))
}

/// Deletes running microservices ranked strictly below `incoming_rank` (plan
/// position), lowest first, until a freed server fits `demand`. Running
/// microservices missing from the plan count as lowest of all. Deletions are
/// applied to `state` even when no server ends up fitting.
pub fn delete_to_fit(
    demand: f64,
    state: &mut ClusterState,
    plan: &ActivationPlan,
    incoming_rank: usize,
    options: SchedulerOptions,
) -> (Option<usize>, Vec<Action>) {
    let mut packer = Packer::new(state, &[], options);
    packer.rank_groups(plan);
    let server = packer.delete_lower(demand, incoming_rank as u32);
    let actions = packer.write_back(state);
    (server.map(|s| s as usize), actions)
}

/// Places `plan` onto `prior`, which must already have failed servers marked
/// unhealthy and emptied.
pub fn schedule(plan: &ActivationPlan, prior: &ClusterState, apps: &[Application]) -> PackingOutcome {
    schedule_with(plan, prior, apps, SchedulerOptions::default())
}

pub fn schedule_with(
    plan: &ActivationPlan,
    prior: &ClusterState,
    apps: &[Application],
    options: SchedulerOptions,
) -> PackingOutcome {
    let mut packer = Packer::new(prior, apps, options);
    let order = packer.rank_groups(plan);
    packer.run(&order);
    packer.finish(prior, &order, plan)
}

// ---------------------------------------------------------------------------

type Key = (OrderedFloat<f64>, u32);

struct Replica {
    group: u32,
    index: u32,
    demand: f64,
    server: Option<u32>,
    prior: Option<u32>,
}

struct Group {
    app: Arc<str>,
    ms: Arc<str>,
    replicas: Vec<u32>,
    placed: u32,
    rank: u32,
}

const UNRANKED: u32 = u32::MAX;

#[derive(Clone, Copy)]
enum Op {
    Assign { rep: u32, server: u32, before: f64 },
    Release { rep: u32, server: u32, before: f64 },
}

pub(crate) struct Packer {
    capacity: Vec<f64>,
    remaining: Vec<f64>,
    healthy: Vec<bool>,
    server_ids: Vec<Arc<str>>,
    fit: BTreeSet<Key>,
    free_total: f64,
    residents: Vec<Vec<u32>>,
    replicas: Vec<Replica>,
    groups: Vec<Group>,
    lookup: HashMap<Arc<str>, HashMap<Arc<str>, u32>>,
    /// Placed groups keyed by (rank, group); unranked groups sort last.
    placed_ranked: BTreeSet<(u32, u32)>,
    journal: Vec<Op>,
    options: SchedulerOptions,
    stats: PackingStats,
}

impl Packer {
    pub(crate) fn new(state: &ClusterState, apps: &[Application], options: SchedulerOptions) -> Self {
        let n = state.server_count();
        let servers = state.servers();
        let mut packer = Packer {
            capacity: servers.iter().map(|s| s.capacity).collect(),
            remaining: (0..n).map(|s| state.remaining(s)).collect(),
            healthy: servers.iter().map(|s| s.healthy).collect(),
            server_ids: servers.iter().map(|s| Arc::from(s.id.as_str())).collect(),
            fit: BTreeSet::new(),
            free_total: 0.0,
            residents: vec![Vec::new(); n],
            replicas: Vec::new(),
            groups: Vec::new(),
            lookup: HashMap::new(),
            placed_ranked: BTreeSet::new(),
            journal: Vec::new(),
            options,
            stats: PackingStats::default(),
        };
        for s in 0..n {
            if packer.healthy[s] {
                packer.fit.insert((OrderedFloat(packer.remaining[s]), s as u32));
                packer.free_total += packer.remaining[s];
            }
        }
        for app in apps {
            let app_id: Arc<str> = Arc::from(app.id());
            for ms in app.microservices() {
                let g = packer.groups.len() as u32;
                let per = ms.per_replica_demand();
                let ms_id: Arc<str> = Arc::from(ms.id.as_str());
                let mut handles = Vec::with_capacity(ms.replicas as usize);
                for r in 0..ms.replicas {
                    handles.push(packer.replicas.len() as u32);
                    packer.replicas.push(Replica {
                        group: g,
                        index: r,
                        demand: per,
                        server: None,
                        prior: None,
                    });
                }
                packer
                    .lookup
                    .entry(app_id.clone())
                    .or_default()
                    .insert(ms_id.clone(), g);
                packer.groups.push(Group {
                    app: app_id.clone(),
                    ms: ms_id,
                    replicas: handles,
                    placed: 0,
                    rank: UNRANKED,
                });
            }
        }
        for (key, p) in state.assignment() {
            let g = packer.group_for(key);
            let rep = match packer.groups[g as usize]
                .replicas
                .iter()
                .copied()
                .find(|&h| packer.replicas[h as usize].index == key.replica)
            {
                Some(h) => h,
                None => {
                    let h = packer.replicas.len() as u32;
                    packer.replicas.push(Replica {
                        group: g,
                        index: key.replica,
                        demand: p.demand,
                        server: None,
                        prior: None,
                    });
                    packer.groups[g as usize].replicas.push(h);
                    h
                }
            };
            let r = &mut packer.replicas[rep as usize];
            r.demand = p.demand;
            r.server = Some(p.server as u32);
            r.prior = Some(p.server as u32);
            packer.residents[p.server].push(rep);
            packer.groups[g as usize].placed += 1;
        }
        packer
    }

    fn group_for(&mut self, key: &ReplicaKey) -> u32 {
        if let Some(&g) = self.lookup.get(&*key.app).and_then(|m| m.get(&*key.ms)) {
            return g;
        }
        let g = self.groups.len() as u32;
        self.lookup
            .entry(key.app.clone())
            .or_default()
            .insert(key.ms.clone(), g);
        self.groups.push(Group {
            app: key.app.clone(),
            ms: key.ms.clone(),
            replicas: Vec::new(),
            placed: 0,
            rank: UNRANKED,
        });
        g
    }

    /// Assigns plan ranks; returns the group of every plan entry in order.
    /// Entries naming unknown microservices get an empty placeholder group
    /// that can never be placed.
    fn rank_groups(&mut self, plan: &ActivationPlan) -> Vec<u32> {
        let mut order = Vec::with_capacity(plan.len());
        for (i, (app, ms)) in plan.pairs().enumerate() {
            let key = ReplicaKey::new(app, ms, 0);
            let g = self.group_for(&key);
            let group = &mut self.groups[g as usize];
            if group.rank == UNRANKED {
                group.rank = i as u32;
            }
            order.push(g);
        }
        // Unranked groups sort after every ranked one, in group order.
        let base = plan.len() as u32;
        for (g, group) in self.groups.iter_mut().enumerate() {
            if group.rank == UNRANKED {
                group.rank = base.saturating_add(g as u32).min(UNRANKED - 1);
            }
        }
        self.placed_ranked = self
            .groups
            .iter()
            .enumerate()
            .filter(|(_, g)| g.placed > 0)
            .map(|(i, g)| (g.rank, i as u32))
            .collect();
        order
    }

    // -- primitive mutations (journaled) -----------------------------------

    fn set_remaining(&mut self, s: u32, value: f64) {
        let su = s as usize;
        if self.healthy[su] {
            self.fit.remove(&(OrderedFloat(self.remaining[su]), s));
            self.fit.insert((OrderedFloat(value), s));
            self.free_total += value - self.remaining[su];
        }
        self.remaining[su] = value;
    }

    fn assign(&mut self, rep: u32, s: u32) {
        let before = self.remaining[s as usize];
        let demand = self.replicas[rep as usize].demand;
        self.set_remaining(s, before - demand);
        self.attach(rep, s);
        self.journal.push(Op::Assign { rep, server: s, before });
    }

    fn release(&mut self, rep: u32) -> Option<u32> {
        let s = self.replicas[rep as usize].server?;
        let before = self.remaining[s as usize];
        let demand = self.replicas[rep as usize].demand;
        self.set_remaining(s, before + demand);
        self.detach(rep, s);
        self.journal.push(Op::Release { rep, server: s, before });
        Some(s)
    }

    fn attach(&mut self, rep: u32, s: u32) {
        self.replicas[rep as usize].server = Some(s);
        self.residents[s as usize].push(rep);
        let g = self.replicas[rep as usize].group;
        let group = &mut self.groups[g as usize];
        group.placed += 1;
        if group.placed == 1 {
            self.placed_ranked.insert((group.rank, g));
        }
    }

    fn detach(&mut self, rep: u32, s: u32) {
        self.replicas[rep as usize].server = None;
        let list = &mut self.residents[s as usize];
        if let Some(pos) = list.iter().position(|&r| r == rep) {
            list.swap_remove(pos);
        }
        let g = self.replicas[rep as usize].group;
        let group = &mut self.groups[g as usize];
        group.placed -= 1;
        if group.placed == 0 {
            self.placed_ranked.remove(&(group.rank, g));
        }
    }

    /// Undoes journal entries back to `mark`, restoring remaining capacities
    /// bit-for-bit.
    fn rollback(&mut self, mark: usize) {
        while self.journal.len() > mark {
            match self.journal.pop().expect("journal entry") {
                Op::Assign { rep, server, before } => {
                    self.detach(rep, server);
                    self.set_remaining(server, before);
                }
                Op::Release { rep, server, before } => {
                    self.attach(rep, server);
                    self.set_remaining(server, before);
                }
            }
        }
    }

    // -- placement strategies ----------------------------------------------

    fn best_fit(&self, demand: f64, exclude: Option<u32>) -> Option<u32> {
        self.fit
            .range((OrderedFloat(demand - EPS), 0)..)
            .map(|&(_, s)| s)
            .find(|&s| Some(s) != exclude)
    }

    pub(crate) fn repack(&mut self, demand: f64) -> Option<u32> {
        if self.free_total < demand - EPS {
            return None;
        }
        // No resident larger than the roomiest server can move anywhere.
        let movable = self.fit.iter().next_back().map_or(0.0, |k| k.0 .0) + EPS;
        // A failed evacuation rolls back exactly, so this order stays valid
        // for the whole scan.
        let candidates: Vec<u32> = self
            .fit
            .iter()
            .rev()
            .map(|&(_, s)| s)
            .filter(|&s| {
                let s = s as usize;
                if self.capacity[s] < demand - EPS || self.residents[s].is_empty() {
                    return false;
                }
                // Both evacuation tiers only ever move residents that fit
                // somewhere.
                let reachable = self.remaining[s]
                    + self.residents[s]
                        .iter()
                        .map(|&r| self.replicas[r as usize].demand)
                        .filter(|&d| d <= movable)
                        .sum::<f64>();
                reachable >= demand - EPS
            })
            .collect();
        let limit = self.options.repack_scan_limit.unwrap_or(usize::MAX);
        candidates
            .into_iter()
            .take(limit)
            .find(|&s| self.try_evacuate(s, demand))
    }

    /// Smallest-first greedy evacuation, then single-replica evacuation from
    /// the largest down. Leaves the packer untouched on failure.
    fn try_evacuate(&mut self, s: u32, demand: f64) -> bool {
        let mark = self.journal.len();
        let mut residents = self.residents[s as usize].clone();
        residents.sort_by(|&a, &b| {
            self.replicas[a as usize]
                .demand
                .total_cmp(&self.replicas[b as usize].demand)
                .then(a.cmp(&b))
        });
        for &rep in &residents {
            if self.remaining[s as usize] >= demand - EPS {
                break;
            }
            if let Some(t) = self.best_fit(self.replicas[rep as usize].demand, Some(s)) {
                self.release(rep);
                self.assign(rep, t);
            }
        }
        if self.remaining[s as usize] >= demand - EPS {
            return true;
        }
        self.rollback(mark);

        for &rep in residents.iter().rev() {
            let d = self.replicas[rep as usize].demand;
            if self.remaining[s as usize] + d < demand - EPS {
                // Sorted descending: nothing smaller can suffice either.
                break;
            }
            if let Some(t) = self.best_fit(d, Some(s)) {
                self.release(rep);
                self.assign(rep, t);
                return true;
            }
        }
        false
    }

    fn delete_group(&mut self, g: u32) -> Vec<u32> {
        let handles = self.groups[g as usize].replicas.clone();
        let mut freed: Vec<u32> = handles.into_iter().filter_map(|h| self.release(h)).collect();
        freed.sort_unstable();
        freed.dedup();
        freed
    }

    pub(crate) fn delete_lower(&mut self, demand: f64, incoming_rank: u32) -> Option<u32> {
        loop {
            let &(rank, g) = self.placed_ranked.iter().next_back()?;
            if rank <= incoming_rank {
                return None;
            }
            let freed = self.delete_group(g);
            let found = match self.options.deletion {
                DeletionMode::LatestFreed => freed
                    .into_iter()
                    .filter(|&s| self.remaining[s as usize] >= demand - EPS)
                    .min_by(|&a, &b| {
                        self.remaining[a as usize]
                            .total_cmp(&self.remaining[b as usize])
                            .then(a.cmp(&b))
                    }),
                DeletionMode::GlobalRetry => self.best_fit(demand, None),
            };
            if found.is_some() {
                return found;
            }
        }
    }

    /// Places every missing replica of `g`; all-or-nothing.
    fn place_group(&mut self, g: u32) -> bool {
        let mark = self.journal.len();
        let rank = self.groups[g as usize].rank;
        let handles = self.groups[g as usize].replicas.clone();
        let mut counts = (0, 0, 0);
        for h in handles {
            if self.replicas[h as usize].server.is_some() {
                continue;
            }
            let demand = self.replicas[h as usize].demand;
            let target = if let Some(s) = self.best_fit(demand, None) {
                counts.0 += 1;
                Some(s)
            } else if let Some(s) = self.repack(demand) {
                counts.1 += 1;
                Some(s)
            } else if let Some(s) = self.delete_lower(demand, rank) {
                counts.2 += 1;
                Some(s)
            } else {
                None
            };
            match target {
                Some(s) => self.assign(h, s),
                None => {
                    self.rollback(mark);
                    return false;
                }
            }
        }
        self.stats.placed_best_fit += counts.0;
        self.stats.placed_after_repack += counts.1;
        self.stats.placed_after_delete += counts.2;
        true
    }

    fn run(&mut self, order: &[u32]) {
        // Running microservices outside the plan go first.
        let outside: Vec<u32> = self
            .groups
            .iter()
            .enumerate()
            .filter(|(_, g)| g.placed > 0 && g.rank as usize >= order.len())
            .map(|(i, _)| i as u32)
            .collect();
        for g in outside {
            self.delete_group(g);
        }
        let mut start = 0;
        loop {
            self.stats.passes += 1;
            let mut failed = None;
            for (i, &g) in order.iter().enumerate().skip(start) {
                let group = &self.groups[g as usize];
                if group.rank as usize != i
                    || group.placed as usize == group.replicas.len() && !group.replicas.is_empty()
                {
                    continue;
                }
                if !self.place_group(g) {
                    failed = Some(i);
                    break;
                }
                self.journal.clear();
            }
            let Some(stop) = failed else { break };
            // Drop the failing microservice and everything ranked below it.
            let mut released = false;
            while let Some(&(rank, g)) = self.placed_ranked.iter().next_back() {
                if (rank as usize) < stop {
                    break;
                }
                released |= !self.delete_group(g).is_empty();
            }
            self.journal.clear();
            if !released {
                break;
            }
            start = stop;
        }
    }

    /// Diff against the prior placement: deletions, migrations, restarts.
    fn actions(&self) -> Vec<Action> {
        let mut deletes = Vec::new();
        let mut migrations = Vec::new();
        let mut restarts = Vec::new();
        for (g, group) in self.groups.iter().enumerate() {
            let _ = g;
            for &h in &group.replicas {
                let r = &self.replicas[h as usize];
                let make = |kind, from: Option<u32>, to: Option<u32>| Action {
                    kind,
                    app: group.app.to_string(),
                    microservice: group.ms.to_string(),
                    replica: r.index,
                    from: from.map(|s| self.server_ids[s as usize].to_string()),
                    to: to.map(|s| self.server_ids[s as usize].to_string()),
                };
                match (r.prior, r.server) {
                    (Some(p), None) => deletes.push((group.rank, make(ActionKind::Delete, Some(p), None))),
                    (Some(p), Some(s)) if p != s => {
                        migrations.push((group.rank, make(ActionKind::Migrate, Some(p), Some(s))))
                    }
                    (None, Some(s)) => restarts.push((group.rank, make(ActionKind::Restart, None, Some(s)))),
                    _ => {}
                }
            }
        }
        // Deletions lowest rank first; migrations and restarts in plan order.
        deletes.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.replica.cmp(&b.1.replica)));
        migrations.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.replica.cmp(&b.1.replica)));
        restarts.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.replica.cmp(&b.1.replica)));
        deletes
            .into_iter()
            .chain(migrations)
            .chain(restarts)
            .map(|(_, a)| a)
            .collect()
    }

    /// Applies the diff to `state` and returns it as actions.
    fn write_back(&self, state: &mut ClusterState) -> Vec<Action> {
        let actions = self.actions();
        let mut moved = Vec::new();
        for group in &self.groups {
            for &h in &group.replicas {
                let r = &self.replicas[h as usize];
                if r.prior != r.server {
                    let key = ReplicaKey {
                        app: group.app.clone(),
                        ms: group.ms.clone(),
                        replica: r.index,
                    };
                    if r.prior.is_some() {
                        state.unplace(&key);
                    }
                    if let Some(s) = r.server {
                        moved.push((key, s as usize, r.demand));
                    }
                }
            }
        }
        for (key, s, demand) in moved {
            state.place(key, s, demand).expect("packer keeps capacity invariants");
        }
        actions
    }

    fn finish(mut self, prior: &ClusterState, order: &[u32], plan: &ActivationPlan) -> PackingOutcome {
        let mut state = prior.clone();
        let actions = self.write_back(&mut state);
        let mut scheduled = Vec::new();
        let mut dropped = Vec::new();
        for (i, ((app, ms), &g)) in plan.pairs().zip(order).enumerate() {
            let group = &self.groups[g as usize];
            if group.rank as usize != i {
                continue;
            }
            let entry = (app.to_string(), ms.to_string());
            if !group.replicas.is_empty() && group.placed as usize == group.replicas.len() {
                scheduled.push(entry);
            } else {
                dropped.push(entry);
            }
        }
        self.stats.deletes = actions.iter().filter(|a| a.kind == ActionKind::Delete).count();
        self.stats.migrations = actions.iter().filter(|a| a.kind == ActionKind::Migrate).count();
        self.stats.restarts = actions.iter().filter(|a| a.kind == ActionKind::Restart).count();
        PackingOutcome {
            state,
            scheduled,
            dropped,
            actions,
            stats: self.stats,
        }
    }
}
