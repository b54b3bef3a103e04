//! Activation planning: a per-application activation order that respects
//! criticality and dependencies, merged across applications under an operator
//! objective until the surviving capacity is used up.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, HashSet};
use std::time::{Duration, Instant};

use ordered_float::OrderedFloat;
use serde::{Deserialize, Serialize};

use crate::model::{Application, EPS};

/// Activation order of one application's microservices (indices into
/// [`Application::microservices`]).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AppRank {
    pub order: Vec<usize>,
}

/// How the dependency-graph traversal decides between descending into a child
/// and deferring it to the frontier queue.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Traversal {
    /// Descend into children at least as critical as the current node; defer
    /// the rest.
    #[default]
    BestFirst,
    /// Descend into children whose tag is >= the current node's tag (the
    /// pseudocode as printed). Kept for comparison only.
    LiteralPseudocode,
}

/// What global ranking does with the first candidate that does not fit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Overflow {
    /// Stop ranking altogether.
    #[default]
    Break,
    /// Retire that candidate's application and keep ranking the others.
    Skip,
}

/// How the fair objective scores a candidate, given its application's
/// allocation `a`, the candidate's demand `d` and the share `fs`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FairKey {
    /// Change in total deviation if activated: `|a + d - fs| - |a - fs|`.
    #[default]
    Marginal,
    /// The application's own deviation if activated: `|a + d - fs|`. An
    /// application still far below its share scores worse than one slightly
    /// above it, so with uneven demands it can be starved.
    Absolute,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannerOptions {
    #[serde(default)]
    pub traversal: Traversal,
    #[serde(default)]
    pub overflow: Overflow,
    #[serde(default)]
    pub fair_key: FairKey,
}

pub fn priority_estimator(app: &Application) -> AppRank {
    priority_estimator_with(app, Traversal::BestFirst)
}

pub fn priority_estimator_with(app: &Application, traversal: Traversal) -> AppRank {
    let ms = app.microservices();
    let key = |i: usize| (ms[i].tag, i);
    let Some(graph) = app.graph() else {
        let mut order: Vec<usize> = (0..ms.len()).collect();
        order.sort_by_key(|&i| key(i));
        return AppRank { order };
    };

    // Children visited most-critical first so the descent is deterministic.
    let children: Vec<Vec<usize>> = (0..ms.len())
        .map(|v| {
            let mut c = graph.children(v).to_vec();
            c.sort_by_key(|&i| key(i));
            c
        })
        .collect();
    let descend = |child: usize, node: usize| match traversal {
        Traversal::BestFirst => ms[child].tag <= ms[node].tag,
        Traversal::LiteralPseudocode => ms[child].tag >= ms[node].tag,
    };

    let mut ranked = vec![false; ms.len()];
    let mut order = Vec::with_capacity(ms.len());
    let mut queue: BinaryHeap<Reverse<(crate::model::Criticality, usize)>> =
        graph.sources().map(|s| Reverse(key(s))).collect();
    // Explicit stack of (node, next child position) replaces the recursive DFS.
    let mut stack: Vec<(usize, usize)> = Vec::new();
    while let Some(Reverse((_, root))) = queue.pop() {
        if ranked[root] {
            continue;
        }
        ranked[root] = true;
        order.push(root);
        stack.push((root, 0));
        while let Some(top) = stack.last_mut() {
            let (node, pos) = *top;
            if pos == children[node].len() {
                stack.pop();
                continue;
            }
            top.1 += 1;
            let child = children[node][pos];
            if ranked[child] {
                continue;
            }
            if descend(child, node) {
                ranked[child] = true;
                order.push(child);
                stack.push((child, 0));
            } else {
                queue.push(Reverse(key(child)));
            }
        }
    }
    AppRank { order }
}

/// Max-min fair split of capacity across applications.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FairShares(pub BTreeMap<String, f64>);

impl FairShares {
    pub fn get(&self, app: &str) -> f64 {
        self.0.get(app).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.0.values().sum()
    }
}

/// Water-filling: every application gets `min(demand, level)` where the level
/// is chosen so the shares add up to `min(capacity, total demand)`.
pub fn compute_water_fill(demands: &BTreeMap<String, f64>, capacity: f64) -> FairShares {
    let level = water_level(demands.values().copied(), capacity);
    FairShares(demands.iter().map(|(k, &d)| (k.clone(), d.min(level))).collect())
}

/// The water level; `f64::INFINITY` when capacity covers every demand.
pub fn water_level(demands: impl IntoIterator<Item = f64>, capacity: f64) -> f64 {
    let mut sorted: Vec<f64> = demands.into_iter().collect();
    sorted.sort_by(f64::total_cmp);
    let mut left = capacity.max(0.0);
    let mut remaining = sorted.len();
    for d in sorted {
        let even = left / remaining as f64;
        if d > even {
            return even;
        }
        left -= d;
        remaining -= 1;
    }
    f64::INFINITY
}

pub fn app_demands(apps: &[Application]) -> BTreeMap<String, f64> {
    apps.iter().map(|a| (a.id().to_string(), a.total_demand())).collect()
}

/// Cross-application ranking rule.
#[derive(Clone, Debug, PartialEq)]
pub enum OperatorObjective {
    /// Higher price per unit resource first.
    Cost,
    /// Least resulting deviation from the water-fill shares first (see
    /// [`FairKey`]).
    Fair(FairShares),
}

/// Objective selector without precomputed state, as used in configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Cost,
    Fair,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Cost => "cost",
            Objective::Fair => "fair",
        }
    }

    pub fn instantiate(self, apps: &[Application], capacity: f64) -> OperatorObjective {
        match self {
            Objective::Cost => OperatorObjective::Cost,
            Objective::Fair => OperatorObjective::Fair(compute_water_fill(&app_demands(apps), capacity)),
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cost" => Ok(Objective::Cost),
            "fair" => Ok(Objective::Fair),
            other => Err(format!("unknown objective `{other}` (expected cost or fair)")),
        }
    }
}

/// Sort key of one candidate; smaller is better.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct ScoreKey {
    primary: OrderedFloat<f64>,
    secondary: OrderedFloat<f64>,
}

impl OperatorObjective {
    fn score(&self, app: &Application, demand: f64, allocated: f64, fair_key: FairKey) -> ScoreKey {
        match self {
            OperatorObjective::Cost => ScoreKey {
                primary: OrderedFloat(-app.price_per_unit()),
                secondary: OrderedFloat(0.0),
            },
            OperatorObjective::Fair(shares) => {
                let share = shares.get(app.id());
                let after = (allocated + demand - share).abs();
                let primary = match fair_key {
                    FairKey::Marginal => after - (allocated - share).abs(),
                    FairKey::Absolute => after,
                };
                ScoreKey {
                    primary: OrderedFloat(primary),
                    // Furthest below its share wins a tie.
                    secondary: OrderedFloat(allocated - share),
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub app: String,
    pub microservice: String,
    /// The objective's primary key at the moment this entry was chosen.
    pub score_key: f64,
}

/// Globally ordered microservices to activate.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActivationPlan {
    entries: Vec<PlanEntry>,
    members: HashSet<(String, String)>,
}

impl ActivationPlan {
    pub fn from_entries(entries: Vec<PlanEntry>) -> Self {
        let members = entries
            .iter()
            .map(|e| (e.app.clone(), e.microservice.clone()))
            .collect();
        ActivationPlan { entries, members }
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        Self::from_entries(
            pairs
                .into_iter()
                .map(|(a, m)| PlanEntry {
                    app: a.to_string(),
                    microservice: m.to_string(),
                    score_key: 0.0,
                })
                .collect(),
        )
    }

    pub fn entries(&self) -> &[PlanEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, app: &str, ms: &str) -> bool {
        self.members.contains(&(app.to_string(), ms.to_string()))
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|e| (e.app.as_str(), e.microservice.as_str()))
    }

    /// JSON array of `{app, microservice, rank, score_key}`.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Array(
            self.entries
                .iter()
                .enumerate()
                .map(|(rank, e)| {
                    serde_json::json!({
                        "app": e.app,
                        "microservice": e.microservice,
                        "rank": rank,
                        "score_key": e.score_key,
                    })
                })
                .collect(),
        )
    }
}

#[derive(PartialEq, Eq)]
struct Candidate<'a> {
    key: ScoreKey,
    app_id: &'a str,
    ms_id: &'a str,
    slot: usize,
    pos: usize,
}

impl Ord for Candidate<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap: invert so the smallest key pops first.
        other
            .key
            .cmp(&self.key)
            .then_with(|| other.app_id.cmp(self.app_id))
            .then_with(|| other.ms_id.cmp(self.ms_id))
    }
}

impl PartialOrd for Candidate<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Merges per-application ranks into one plan. The queue holds the next
/// unranked microservice of every application.
pub fn global_rank(
    app_ranks: &[(&Application, AppRank)],
    objective: &OperatorObjective,
    capacity: f64,
    options: PlannerOptions,
) -> ActivationPlan {
    let mut allocated = vec![0.0; app_ranks.len()];
    let candidate = |slot: usize, pos: usize, allocated: f64| {
        let (app, rank) = &app_ranks[slot];
        rank.order.get(pos).map(|&m| {
            let ms = app.microservice(m);
            Candidate {
                key: objective.score(app, ms.demand, allocated, options.fair_key),
                app_id: app.id(),
                ms_id: &ms.id,
                slot,
                pos,
            }
        })
    };
    let mut queue: BinaryHeap<Candidate> = (0..app_ranks.len())
        .filter_map(|slot| candidate(slot, 0, 0.0))
        .collect();
    let mut left = capacity;
    let mut entries = Vec::new();
    while let Some(c) = queue.pop() {
        let (app, rank) = &app_ranks[c.slot];
        let demand = app.microservice(rank.order[c.pos]).demand;
        if left - demand < -EPS {
            match options.overflow {
                Overflow::Break => break,
                Overflow::Skip => continue,
            }
        }
        left -= demand;
        allocated[c.slot] += demand;
        entries.push(PlanEntry {
            app: c.app_id.to_string(),
            microservice: c.ms_id.to_string(),
            score_key: c.key.primary.0,
        });
        if let Some(next) = candidate(c.slot, c.pos + 1, allocated[c.slot]) {
            queue.push(next);
        }
    }
    ActivationPlan::from_entries(entries)
}

#[derive(Clone, Debug)]
pub struct PlanReport {
    pub plan: ActivationPlan,
    pub elapsed: Duration,
}

/// Ranks every application, then merges under `objective` within `capacity`.
pub fn plan(apps: &[Application], capacity: f64, objective: Objective, options: PlannerOptions) -> PlanReport {
    let started = Instant::now();
    let objective = objective.instantiate(apps, capacity);
    let plan = plan_with(apps, capacity, &objective, options);
    PlanReport {
        plan,
        elapsed: started.elapsed(),
    }
}

pub fn plan_with(
    apps: &[Application],
    capacity: f64,
    objective: &OperatorObjective,
    options: PlannerOptions,
) -> ActivationPlan {
    let ranks: Vec<(&Application, AppRank)> = apps
        .iter()
        .map(|a| (a, priority_estimator_with(a, options.traversal)))
        .collect();
    global_rank(&ranks, objective, capacity, options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AppSpec;

    fn ids(app: &Application, rank: &AppRank) -> Vec<String> {
        rank.order.iter().map(|&i| app.microservice(i).id.clone()).collect()
    }

    #[test]
    fn no_graph_sorts_by_tag_then_id() {
        let app = AppSpec::new("x", 1.0)
            .microservice("a", 1.0, 2)
            .microservice("b", 1.0, 1)
            .microservice("c", 1.0, 1)
            .build()
            .unwrap();
        assert_eq!(ids(&app, &priority_estimator(&app)), ["b", "c", "a"]);
    }

    #[test]
    fn literal_traversal_descends_into_less_critical_children() {
        // src(C1) -> {x(C3), y(C2)}; literal mode chases x before y.
        let app = AppSpec::new("d", 1.0)
            .microservice("src", 1.0, 1)
            .microservice("x", 1.0, 3)
            .microservice("y", 1.0, 2)
            .edge("src", "x")
            .edge("src", "y")
            .build()
            .unwrap();
        let literal = priority_estimator_with(&app, Traversal::LiteralPseudocode);
        assert_eq!(ids(&app, &literal), ["src", "y", "x"]);
        assert_eq!(ids(&app, &priority_estimator(&app)), ["src", "y", "x"]);
        let app = AppSpec::new("d", 1.0)
            .microservice("src", 1.0, 2)
            .microservice("hot", 1.0, 1)
            .microservice("cold", 1.0, 3)
            .microservice("deep", 1.0, 4)
            .edge("src", "cold")
            .edge("cold", "deep")
            .edge("src", "hot")
            .build()
            .unwrap();
        // Literal: cold (3 >= 2) and deep are descended into before hot is popped.
        let literal = priority_estimator_with(&app, Traversal::LiteralPseudocode);
        assert_eq!(ids(&app, &literal), ["src", "cold", "deep", "hot"]);
        assert_eq!(ids(&app, &priority_estimator(&app)), ["src", "hot", "cold", "deep"]);
    }

    #[test]
    fn water_level_edges() {
        assert_eq!(water_level([], 100.0), f64::INFINITY);
        assert_eq!(water_level([5.0], 0.0), 0.0);
        assert!((water_level([10.0, 50.0, 90.0], 100.0) - 45.0).abs() < 1e-12);
        let shares = compute_water_fill(&BTreeMap::new(), 100.0);
        assert!(shares.0.is_empty());
    }

    #[test]
    fn skip_mode_keeps_ranking_other_apps() {
        let big = AppSpec::new("big", 9.0).microservice("m", 5.0, 1).build().unwrap();
        let small = AppSpec::new("small", 1.0).microservice("m", 1.0, 1).build().unwrap();
        let ranks = vec![(&big, priority_estimator(&big)), (&small, priority_estimator(&small))];
        let literal = global_rank(&ranks, &OperatorObjective::Cost, 2.0, PlannerOptions::default());
        assert!(literal.is_empty());
        let skip = global_rank(
            &ranks,
            &OperatorObjective::Cost,
            2.0,
            PlannerOptions {
                overflow: Overflow::Skip,
                ..Default::default()
            },
        );
        assert_eq!(skip.pairs().collect::<Vec<_>>(), [("small", "m")]);
    }

    #[test]
    fn plan_json_export_has_ranks() {
        let plan = ActivationPlan::from_pairs([("a", "x"), ("b", "y")]);
        let json = plan.to_json();
        assert_eq!(json[1]["rank"], 1);
        assert_eq!(json[1]["microservice"], "y");
        assert!(plan.contains("a", "x"));
        assert!(!plan.contains("a", "y"));
    }
}
