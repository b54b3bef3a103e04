//! Non-cooperative comparison schemes.
//!
//! - `default`: reschedules whatever is missing in (app, microservice) order
//!   with first-fit; nothing is ever moved or deleted.
//! - `fair`: water-fill shares per application, filled in dependency order
//!   with criticality ignored.
//! - `priority`: criticality honoured globally, no per-application quota.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use crate::model::{Application, ClusterState, ReplicaKey, EPS};
use crate::planner::{app_demands, compute_water_fill, priority_estimator, ActivationPlan};
use crate::scheduler::{schedule, Action, ActionKind, PackingOutcome, PackingStats};

/// Max-segment tree over remaining capacity; finds the leftmost healthy
/// server that fits.
struct FirstFit {
    size: usize,
    tree: Vec<f64>,
}

impl FirstFit {
    fn new(remaining: &[f64]) -> Self {
        let size = remaining.len().next_power_of_two().max(1);
        let mut tree = vec![f64::NEG_INFINITY; 2 * size];
        tree[size..size + remaining.len()].copy_from_slice(remaining);
        for i in (1..size).rev() {
            tree[i] = tree[2 * i].max(tree[2 * i + 1]);
        }
        FirstFit { size, tree }
    }

    fn find(&self, demand: f64) -> Option<usize> {
        if self.tree[1] < demand - EPS {
            return None;
        }
        let mut i = 1;
        while i < self.size {
            i = if self.tree[2 * i] >= demand - EPS {
                2 * i
            } else {
                2 * i + 1
            };
        }
        Some(i - self.size)
    }

    fn set(&mut self, server: usize, value: f64) {
        let mut i = server + self.size;
        self.tree[i] = value;
        while i > 1 {
            i /= 2;
            self.tree[i] = self.tree[2 * i].max(self.tree[2 * i + 1]);
        }
    }
}

pub fn baseline_default(apps: &[Application], prior: &ClusterState) -> PackingOutcome {
    let mut state = prior.clone();
    let remaining: Vec<f64> = (0..state.server_count())
        .map(|s| {
            if state.servers()[s].healthy {
                state.remaining(s)
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let mut fit = FirstFit::new(&remaining);
    let mut actions = Vec::new();
    let mut scheduled = Vec::new();
    let mut dropped = Vec::new();
    let mut ordered: Vec<&Application> = apps.iter().collect();
    ordered.sort_by(|a, b| a.id().cmp(b.id()));
    for app in ordered {
        for ms in app.microservices() {
            let per = ms.per_replica_demand();
            let mut running = 0;
            for r in 0..ms.replicas {
                let key = ReplicaKey::new(app.id(), &ms.id, r);
                if state.placement(&key).is_some() {
                    running += 1;
                    continue;
                }
                let Some(s) = fit.find(per) else { continue };
                state.place(key, s, per).expect("first-fit respects capacity");
                fit.set(s, state.remaining(s));
                running += 1;
                actions.push(Action {
                    kind: ActionKind::Restart,
                    app: app.id().to_string(),
                    microservice: ms.id.clone(),
                    replica: r,
                    from: None,
                    to: Some(state.servers()[s].id.clone()),
                });
            }
            let entry = (app.id().to_string(), ms.id.clone());
            if running == ms.replicas {
                scheduled.push(entry);
            } else {
                dropped.push(entry);
            }
        }
    }
    let stats = PackingStats {
        placed_best_fit: actions.len(),
        passes: 1,
        restarts: actions.len(),
        ..Default::default()
    };
    PackingOutcome {
        state,
        scheduled,
        dropped,
        actions,
        stats,
    }
}

/// Topological order of an application's microservices, smallest index first
/// among the ready ones; plain index order without a dependency graph.
pub fn topological_by_id(app: &Application) -> Vec<usize> {
    match app.graph() {
        Some(graph) => graph.topological_order(),
        None => (0..app.len()).collect(),
    }
}

/// The plan the fair baseline hands to the packer.
pub fn fair_plan(apps: &[Application], capacity: f64) -> ActivationPlan {
    let shares = compute_water_fill(&app_demands(apps), capacity);
    let prefixes: Vec<(&Application, Vec<usize>)> = apps
        .iter()
        .map(|app| {
            let share = shares.get(app.id());
            let mut used = 0.0;
            let prefix = topological_by_id(app)
                .into_iter()
                .take_while(|&j| {
                    used += app.microservice(j).demand;
                    used <= share + EPS
                })
                .collect();
            (app, prefix)
        })
        .collect();
    let mut by_app: Vec<&(&Application, Vec<usize>)> = prefixes.iter().collect();
    by_app.sort_by(|a, b| a.0.id().cmp(b.0.id()));
    let longest = by_app.iter().map(|(_, p)| p.len()).max().unwrap_or(0);
    let mut pairs = Vec::new();
    for pos in 0..longest {
        for (app, prefix) in &by_app {
            if let Some(&j) = prefix.get(pos) {
                pairs.push((app.id(), app.microservice(j).id.as_str()));
            }
        }
    }
    ActivationPlan::from_pairs(pairs)
}

pub fn baseline_fair(apps: &[Application], capacity: f64, prior: &ClusterState) -> PackingOutcome {
    schedule(&fair_plan(apps, capacity), prior, apps)
}

/// The plan the priority baseline hands to the packer: a merge of every
/// application's criticality order by (tag, app id, microservice id), cut at
/// the first microservice that no longer fits.
pub fn priority_plan(apps: &[Application], capacity: f64) -> ActivationPlan {
    let ranks: BTreeMap<&str, (&Application, Vec<usize>)> = apps
        .iter()
        .map(|a| (a.id(), (a, priority_estimator(a).order)))
        .collect();
    let head = |app: &Application, order: &[usize], pos: usize| {
        order.get(pos).map(|&j| {
            let ms = app.microservice(j);
            Reverse((ms.tag, app.id().to_string(), ms.id.clone(), pos))
        })
    };
    let mut queue: BinaryHeap<_> = ranks.values().filter_map(|(app, order)| head(app, order, 0)).collect();
    let mut left = capacity;
    let mut pairs: Vec<(String, String)> = Vec::new();
    while let Some(Reverse((_, app_id, ms_id, pos))) = queue.pop() {
        let (app, order) = &ranks[app_id.as_str()];
        let demand = app.microservice(order[pos]).demand;
        if left - demand < -EPS {
            break;
        }
        left -= demand;
        if let Some(next) = head(app, order, pos + 1) {
            queue.push(next);
        }
        pairs.push((app_id, ms_id));
    }
    ActivationPlan::from_pairs(pairs.iter().map(|(a, m)| (a.as_str(), m.as_str())))
}

pub fn baseline_priority(apps: &[Application], capacity: f64, prior: &ClusterState) -> PackingOutcome {
    schedule(&priority_plan(apps, capacity), prior, apps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AppSpec;

    fn flat(id: &str, n: usize, tag_of: impl Fn(usize) -> u32) -> Application {
        let mut spec = AppSpec::new(id, 1.0);
        for i in 0..n {
            spec = spec.microservice(&format!("m{i}"), 1.0, tag_of(i));
        }
        spec.build().unwrap()
    }

    #[test]
    fn first_fit_tree_finds_leftmost() {
        let mut ff = FirstFit::new(&[1.0, 5.0, 3.0, 9.0, 2.0]);
        assert_eq!(ff.find(2.0), Some(1));
        assert_eq!(ff.find(6.0), Some(3));
        assert_eq!(ff.find(10.0), None);
        ff.set(1, 0.0);
        assert_eq!(ff.find(2.0), Some(2));
    }

    #[test]
    fn default_without_failures_does_nothing() {
        let app = flat("a", 3, |_| 1);
        let mut state = ClusterState::uniform(2, 5.0);
        for i in 0..3 {
            state
                .place(ReplicaKey::new("a", &format!("m{i}"), 0), i % 2, 1.0)
                .unwrap();
        }
        let out = baseline_default(std::slice::from_ref(&app), &state);
        assert!(out.actions.is_empty());
        assert_eq!(out.state, state);
    }

    #[test]
    fn fair_gives_equal_counts_to_equal_apps() {
        let apps = vec![flat("a", 6, |_| 1), flat("b", 6, |_| 1)];
        let plan = fair_plan(&apps, 8.0);
        let count = |id: &str| plan.pairs().filter(|(a, _)| *a == id).count();
        assert_eq!(count("a"), 4);
        assert_eq!(count("b"), 4);
        let plan = fair_plan(&apps, 100.0);
        assert_eq!(plan.len(), 12);
    }

    #[test]
    fn fair_ignores_tags() {
        // Only C1 is the last microservice; the share runs out before it.
        let apps = vec![flat("a", 4, |i| if i == 3 { 1 } else { 2 }), flat("b", 4, |_| 1)];
        let plan = fair_plan(&apps, 4.0);
        assert!(!plan.contains("a", "m3"));
    }

    #[test]
    fn priority_lets_many_criticals_starve_others() {
        let apps = vec![flat("a", 6, |_| 1), flat("b", 3, |i| i as u32 + 1)];
        let plan = priority_plan(&apps, 7.0);
        let pairs: Vec<_> = plan.pairs().map(|(a, m)| format!("{a}/{m}")).collect();
        assert_eq!(pairs, ["a/m0", "a/m1", "a/m2", "a/m3", "a/m4", "a/m5", "b/m0"]);
        assert!(priority_plan(&apps, 0.0).is_empty());
    }
}
