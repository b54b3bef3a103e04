//! Invariant suites over randomly generated applications and clusters,
//! shared by the property tests and the acceptance report.

use std::collections::{BTreeMap, HashSet};

use super::common::*;
use diagscale::baselines::{baseline_default, baseline_fair, baseline_priority};
use diagscale::model::{load_cluster, load_workload, save_cluster, save_workload, EPS};
use diagscale::oracle::constraint_violations;
use diagscale::planner::{app_demands, global_rank, priority_estimator_with, FairKey, Overflow, Traversal};
use diagscale::scheduler::schedule;
use diagscale::sim::{run_episode, ScenarioSpec, SchemeOptions, SchemeSpec, SweepConfig};
use diagscale::workload::{generate_workload, GenSpec, Tagging};
use diagscale::{
    compute_water_fill, plan, priority_estimator, ActivationPlan, Application, ClusterState, Objective,
    OperatorObjective, PlannerOptions, ReplicaKey,
};
use proptest::prelude::*;
use proptest::test_runner::{TestCaseError, TestRunner};

pub fn config() -> ProptestConfig {
    ProptestConfig {
        failure_persistence: Some(Box::new(proptest::test_runner::FileFailurePersistence::Off)),
        ..ProptestConfig::with_cases(1000)
    }
}

fn apps_strategy(max_apps: usize, max_nodes: usize) -> impl Strategy<Value = Vec<RawApp>> {
    prop::collection::vec(raw_app(max_nodes, 4), 1..=max_apps)
}

fn options_strategy() -> impl Strategy<Value = PlannerOptions> {
    (any::<bool>(), any::<bool>(), any::<bool>()).prop_map(|(lit, skip, abs)| PlannerOptions {
        traversal: if lit {
            Traversal::LiteralPseudocode
        } else {
            Traversal::BestFirst
        },
        overflow: if skip { Overflow::Skip } else { Overflow::Break },
        fair_key: if abs { FairKey::Absolute } else { FairKey::Marginal },
    })
}

fn demand_of(apps: &[Application], app: &str, ms: &str) -> f64 {
    let a = apps.iter().find(|a| a.id() == app).unwrap();
    a.microservice(a.index_of(ms).unwrap()).demand
}

/// Straight-line global ranking: rescan every application head each step.
fn reference_rank(
    apps: &[Application],
    objective: Objective,
    capacity: f64,
    options: PlannerOptions,
) -> Vec<(String, String)> {
    let ranks: Vec<Vec<usize>> = apps
        .iter()
        .map(|a| priority_estimator_with(a, options.traversal).order)
        .collect();
    let shares = compute_water_fill(&app_demands(apps), capacity);
    let mut pos = vec![0usize; apps.len()];
    let mut alloc = vec![0.0f64; apps.len()];
    let mut retired = vec![false; apps.len()];
    let mut left = capacity;
    let mut out = Vec::new();
    loop {
        let mut best: Option<((f64, f64, &str, &str), usize)> = None;
        for (i, app) in apps.iter().enumerate() {
            if retired[i] || pos[i] == ranks[i].len() {
                continue;
            }
            let ms = app.microservice(ranks[i][pos[i]]);
            let (primary, secondary) = match objective {
                Objective::Cost => (-app.price_per_unit(), 0.0),
                Objective::Fair => {
                    let fs = shares.get(app.id());
                    let after = (alloc[i] + ms.demand - fs).abs();
                    let p = match options.fair_key {
                        FairKey::Marginal => after - (alloc[i] - fs).abs(),
                        FairKey::Absolute => after,
                    };
                    (p, alloc[i] - fs)
                }
            };
            let key = (primary, secondary, app.id(), ms.id.as_str());
            let better = match &best {
                None => true,
                Some((b, _)) => key
                    .0
                    .total_cmp(&b.0)
                    .then(key.1.total_cmp(&b.1))
                    .then(key.2.cmp(b.2))
                    .then(key.3.cmp(b.3))
                    .is_lt(),
            };
            if better {
                best = Some((key, i));
            }
        }
        let Some(((_, _, app_id, ms_id), i)) = best else { break };
        let d = apps[i].microservice(ranks[i][pos[i]]).demand;
        if left - d < -EPS {
            match options.overflow {
                Overflow::Break => break,
                Overflow::Skip => {
                    retired[i] = true;
                    continue;
                }
            }
        }
        left -= d;
        alloc[i] += d;
        pos[i] += 1;
        out.push((app_id.to_string(), ms_id.to_string()));
    }
    out
}

fn pairs(plan: &ActivationPlan) -> Vec<(String, String)> {
    plan.pairs().map(|(a, m)| (a.to_string(), m.to_string())).collect()
}

/// Runs one property for the configured number of cases.
fn check<S: Strategy>(strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    TestRunner::new(config())
        .run(&strategy, test)
        .map_err(|e| e.to_string())
}

#[allow(dead_code)]
pub const SUITES: &[(&str, fn() -> Result<(), String>)] = &[
    ("plan_prefixes_are_closed", plan_prefixes_are_closed),
    (
        "estimator_respects_frontier_criticality",
        estimator_respects_frontier_criticality,
    ),
    (
        "estimator_matches_exhaustive_minimum",
        estimator_matches_exhaustive_minimum,
    ),
    (
        "plan_fits_capacity_and_matches_reference",
        plan_fits_capacity_and_matches_reference,
    ),
    (
        "fair_unit_demands_minimize_deviation",
        fair_unit_demands_minimize_deviation,
    ),
    (
        "schedules_are_valid_prefixes_and_idempotent",
        schedules_are_valid_prefixes_and_idempotent,
    ),
    ("capacity_is_never_exceeded", capacity_is_never_exceeded),
    (
        "workload_and_cluster_json_round_trip",
        workload_and_cluster_json_round_trip,
    ),
    (
        "generator_output_round_trips_and_is_seed_deterministic",
        generator_output_round_trips_and_is_seed_deterministic,
    ),
    ("water_fill_shares_are_max_min_fair", water_fill_shares_are_max_min_fair),
    ("sweep_config_json_round_trips", sweep_config_json_round_trips),
    ("plans_are_deterministic", plans_are_deterministic),
    ("episodes_are_seed_deterministic", episodes_are_seed_deterministic),
];

pub fn plan_prefixes_are_closed() -> Result<(), String> {
    check(
        (apps_strategy(4, 10), 0.0f64..60.0, any::<bool>(), options_strategy()),
        |(raws, capacity, fair, options)| {
            let apps = build_apps(&raws, &PLAIN);
            let objective = if fair { Objective::Fair } else { Objective::Cost };
            let plan = plan(&apps, capacity, objective, options).plan;
            let mut seen: HashSet<(String, String)> = HashSet::new();
            for (app_id, ms_id) in plan.pairs() {
                let app = apps.iter().find(|a| a.id() == app_id).unwrap();
                let idx = app.index_of(ms_id).unwrap();
                if let Some(g) = app.graph() {
                    if !g.is_source(idx) {
                        let has_caller = g
                            .parents(idx)
                            .iter()
                            .any(|&p| seen.contains(&(app_id.to_string(), app.microservice(p).id.clone())));
                        prop_assert!(has_caller, "{app_id}/{ms_id} ranked before all of its callers");
                    }
                }
                seen.insert((app_id.to_string(), ms_id.to_string()));
            }
            Ok(())
        },
    )
}

pub fn estimator_respects_frontier_criticality() -> Result<(), String> {
    check(raw_app(12, 5), |raw| {
        let app = build_app("a", &raw, &PLAIN);
        let order = priority_estimator(&app).order;
        let mut sorted = order.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..app.len()).collect::<Vec<_>>());
        let Some(g) = app.graph() else {
            let keys: Vec<_> = order.iter().map(|&v| (app.microservice(v).tag, v)).collect();
            prop_assert!(keys.windows(2).all(|w| w[0] < w[1]));
            return Ok(());
        };
        let tag = |v: usize| app.microservice(v).tag;
        let mut ranked = vec![false; app.len()];
        // Nodes of the current depth-first chain. While one of them has an
        // unranked child no more critical than itself, the next append must
        // be such a child; otherwise it comes from a queue pop.
        let mut chain: Vec<usize> = Vec::new();
        for &v in &order {
            let descents: Vec<usize> = chain
                .iter()
                .flat_map(|&p| g.children(p).iter().filter(move |&&c| tag(c) <= tag(p)).copied())
                .filter(|&c| !ranked[c])
                .collect();
            if descents.is_empty() {
                let frontier_min = (0..app.len())
                    .filter(|&u| !ranked[u] && (g.is_source(u) || g.parents(u).iter().any(|&p| ranked[p])))
                    .map(|u| (tag(u), u))
                    .min()
                    .unwrap();
                prop_assert_eq!((tag(v), v), frontier_min, "pop is not the most critical frontier node");
                chain.clear();
            } else {
                prop_assert!(descents.contains(&v), "{v} appended while a descent was pending");
            }
            chain.push(v);
            ranked[v] = true;
        }
        Ok(())
    })
}

pub fn estimator_matches_exhaustive_minimum() -> Result<(), String> {
    check(raw_app(7, 4), |raw| {
        // With callers never less critical than callees, the traversal yields
        // the lexicographically smallest tag sequence of any valid order.
        let app = build_app("a", &raw, &CONSISTENT);
        let ours = priority_estimator(&app).order;
        let tags = |o: &[usize]| o.iter().map(|&i| app.microservice(i).tag.level()).collect::<Vec<_>>();
        let all = prefix_closed_orders(&app);
        prop_assert!(all.contains(&ours), "order is not prefix-closed");
        let best = all.iter().map(|o| tags(o)).min().unwrap();
        prop_assert_eq!(tags(&ours), best);
        Ok(())
    })
}

pub fn plan_fits_capacity_and_matches_reference() -> Result<(), String> {
    check(
        (apps_strategy(4, 8), 0.0f64..40.0, any::<bool>(), options_strategy()),
        |(raws, capacity, fair, options)| {
            let apps = build_apps(&raws, &PLAIN);
            let objective = if fair { Objective::Fair } else { Objective::Cost };
            let plan = plan(&apps, capacity, objective, options).plan;
            let used: f64 = plan.pairs().map(|(a, m)| demand_of(&apps, a, m)).sum();
            prop_assert!(used <= capacity + 1e-6);
            prop_assert_eq!(pairs(&plan), reference_rank(&apps, objective, capacity, options));
            Ok(())
        },
    )
}

pub fn fair_unit_demands_minimize_deviation() -> Result<(), String> {
    check((1usize..=4, 1usize..=6, 0u32..=24), |(n_apps, len, capacity)| {
        let apps: Vec<Application> = (0..n_apps)
            .map(|i| {
                let mut spec = diagscale::AppSpec::new(format!("a{i}"), 1.0);
                for j in 0..len {
                    spec = spec.microservice(&format!("m{j}"), 1.0, 1);
                }
                spec.build().unwrap()
            })
            .collect();
        let capacity = capacity as f64;
        let shares = compute_water_fill(&app_demands(&apps), capacity);
        let plan = plan(&apps, capacity, Objective::Fair, PlannerOptions::default()).plan;
        let mut counts: BTreeMap<&str, usize> = apps.iter().map(|a| (a.id(), 0)).collect();
        for (a, _) in plan.pairs() {
            *counts.get_mut(a).unwrap() += 1;
        }
        let deviation = |c: &[usize]| -> f64 {
            apps.iter()
                .zip(c)
                .map(|(a, &c)| (c as f64 - shares.get(a.id())).abs())
                .sum()
        };
        for a in &apps {
            let s = shares.get(a.id());
            let c = counts[a.id()] as f64;
            prop_assert!(
                c >= s.floor() - 1e-9 && c <= s.ceil() + 1e-9,
                "{} got {c}, share {s}",
                a.id()
            );
        }
        let ours: Vec<usize> = apps.iter().map(|a| counts[a.id()]).collect();
        // Exhaustive search over every allocation that uses all the capacity
        // it can, as a truncated ranking always does.
        let filled = (capacity as usize).min(n_apps * len);
        prop_assert_eq!(ours.iter().sum::<usize>(), filled);
        let mut best = f64::INFINITY;
        let mut c = vec![0usize; n_apps];
        loop {
            if c.iter().sum::<usize>() == filled {
                best = best.min(deviation(&c));
            }
            let mut k = 0;
            while k < n_apps && c[k] == len {
                c[k] = 0;
                k += 1;
            }
            if k == n_apps {
                break;
            }
            c[k] += 1;
        }
        prop_assert!((deviation(&ours) - best).abs() < 1e-9);
        Ok(())
    })
}

pub fn schedules_are_valid_prefixes_and_idempotent() -> Result<(), String> {
    check(
        (
            apps_strategy(3, 8),
            prop::collection::vec(2u32..=10, 1..=6),
            any::<u64>(),
            any::<u32>(),
            any::<bool>(),
        ),
        |(raws, sizes, seed, fail_mask, fair)| {
            let apps = build_apps(&raws, &CONSISTENT);
            let prior = random_cluster(&apps, &sizes, seed, fail_mask);
            let objective = if fair { Objective::Fair } else { Objective::Cost };
            let plan = plan(&apps, prior.healthy_capacity(), objective, PlannerOptions::default()).plan;
            let out = schedule(&plan, &prior, &apps);
            prop_assert!(out.state.validate_against(&apps).is_ok());
            prop_assert_eq!(constraint_violations(&apps, &out.state), vec![]);

            let all = pairs(&plan);
            let k = out.scheduled.len();
            prop_assert_eq!(&out.scheduled[..], &all[..k]);
            prop_assert_eq!(&out.dropped[..], &all[k..]);
            if out.stats.migrations > 0 {
                prop_assert!(out.stats.placed_after_repack > 0);
            }

            let again = schedule(&plan, &out.state, &apps);
            prop_assert!(again.actions.is_empty(), "{:?}", again.actions);
            prop_assert_eq!(again.state, out.state);

            for baseline in [
                baseline_default(&apps, &prior),
                baseline_fair(&apps, prior.healthy_capacity(), &prior),
                baseline_priority(&apps, prior.healthy_capacity(), &prior),
            ] {
                prop_assert!(baseline.state.validate_against(&apps).is_ok());
            }
            Ok(())
        },
    )
}

pub fn capacity_is_never_exceeded() -> Result<(), String> {
    check(
        (
            prop::collection::vec(0u32..=6, 1..=5),
            prop::collection::vec((0u8..4, 0usize..8, 0usize..5, 1u32..=4), 0..60),
        ),
        |(sizes, ops)| {
            let servers = sizes
                .iter()
                .enumerate()
                .map(|(i, &c)| diagscale::ServerNode::new(format!("s{i}"), c as f64))
                .collect();
            let mut state = ClusterState::new(servers).unwrap();
            for (op, key, server, demand) in ops {
                let server = server % sizes.len();
                let key = ReplicaKey::new("a", &format!("m{key}"), 0);
                match op {
                    0 | 1 => {
                        let _ = state.place(key, server, demand as f64 * 0.5);
                    }
                    2 => {
                        state.unplace(&key);
                    }
                    _ => {
                        if demand == 1 {
                            state.fail_server(server);
                        } else {
                            state.revive_server(server);
                        }
                    }
                }
                prop_assert!(state.validate().is_ok());
                let mut used = vec![0.0; sizes.len()];
                for p in state.assignment().values() {
                    prop_assert!(state.servers()[p.server].healthy);
                    used[p.server] += p.demand;
                }
                for (s, u) in used.iter().enumerate() {
                    prop_assert!(*u <= state.servers()[s].capacity + 1e-9);
                }
            }
            Ok(())
        },
    )
}

pub fn workload_and_cluster_json_round_trip() -> Result<(), String> {
    check(
        (
            apps_strategy(3, 8),
            prop::collection::vec(2u32..=10, 1..=4),
            any::<u64>(),
        ),
        |(raws, sizes, seed)| {
            let apps = build_apps(&raws, &PLAIN);
            let bytes = save_workload(&apps);
            let back = load_workload(bytes.as_slice()).unwrap();
            prop_assert_eq!(&back, &apps);
            prop_assert_eq!(save_workload(&back), bytes);

            let cluster = random_cluster(&apps, &sizes, seed, 0);
            let back = load_cluster(save_cluster(&cluster).as_slice()).unwrap();
            prop_assert_eq!(back, cluster);
            Ok(())
        },
    )
}

pub fn generator_output_round_trips_and_is_seed_deterministic() -> Result<(), String> {
    check(
        (any::<u64>(), 1usize..=3, 2usize..=30, any::<bool>()),
        |(seed, apps, max_size, freq)| {
            let spec = GenSpec {
                seed,
                apps,
                min_size: 2,
                max_size,
                tagging: if freq { Tagging::FREQ_P90 } else { Tagging::SERVICE_P90 },
                ..GenSpec::default()
            };
            let first = generate_workload(&spec).unwrap();
            let second = generate_workload(&spec).unwrap();
            prop_assert_eq!(&first, &second);
            let bytes = save_workload(&first);
            prop_assert_eq!(load_workload(bytes.as_slice()).unwrap(), first);

            let json = serde_json::to_string(&spec).unwrap();
            prop_assert_eq!(serde_json::from_str::<GenSpec>(&json).unwrap(), spec);
            Ok(())
        },
    )
}

pub fn water_fill_shares_are_max_min_fair() -> Result<(), String> {
    check(
        (prop::collection::vec(0.0f64..50.0, 1..=12), 0.0f64..200.0),
        |(demands, capacity)| {
            let map: BTreeMap<String, f64> = demands
                .iter()
                .enumerate()
                .map(|(i, &d)| (format!("a{i:02}"), d))
                .collect();
            let shares = compute_water_fill(&map, capacity);
            let total: f64 = demands.iter().sum();
            prop_assert!(shares.total() <= capacity + 1e-9);
            prop_assert!((shares.total() - capacity.min(total)).abs() < 1e-6);
            let level = water_level_bisect(&demands, capacity);
            for (id, &d) in &map {
                let s = shares.get(id);
                prop_assert!(s <= d + 1e-12);
                prop_assert!((s - d.min(level)).abs() < 1e-6, "{id}: {s} vs {}", d.min(level));
            }
            Ok(())
        },
    )
}

pub fn sweep_config_json_round_trips() -> Result<(), String> {
    check(
        (
            any::<u64>(),
            1usize..5000,
            0.1f64..1.0,
            prop::collection::vec(0.0f64..=1.0, 1..6),
            prop::collection::vec(any::<u64>(), 1..6),
            any::<bool>(),
        ),
        |(seed, servers, load, fracs, seeds, timings)| {
            let config = SweepConfig {
                scenario: ScenarioSpec {
                    workload: GenSpec {
                        seed,
                        ..GenSpec::default()
                    },
                    servers,
                    load,
                    ..ScenarioSpec::default()
                },
                failure_fracs: fracs,
                seeds,
                timings,
                ..SweepConfig::default()
            };
            let json = serde_json::to_string(&config).unwrap();
            let back: SweepConfig = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(serde_json::to_string(&back).unwrap(), json);
            Ok(())
        },
    )
}

pub fn plans_are_deterministic() -> Result<(), String> {
    check(
        (apps_strategy(4, 10), 0.0f64..60.0, any::<bool>()),
        |(raws, capacity, fair)| {
            let apps = build_apps(&raws, &PLAIN);
            let objective = if fair { Objective::Fair } else { Objective::Cost };
            let a = plan(&apps, capacity, objective, PlannerOptions::default()).plan;
            let mut reversed = apps.clone();
            reversed.reverse();
            let b = plan(&reversed, capacity, objective, PlannerOptions::default()).plan;
            prop_assert_eq!(a.to_json().to_string(), b.to_json().to_string());
            let instantiated = objective.instantiate(&apps, capacity);
            let c = global_rank(
                &apps.iter().map(|a| (a, priority_estimator(a))).collect::<Vec<_>>(),
                &instantiated,
                capacity,
                PlannerOptions::default(),
            );
            prop_assert_eq!(pairs(&a), pairs(&c));
            if let OperatorObjective::Fair(shares) = instantiated {
                prop_assert!(
                    (shares.total() - capacity.min(apps.iter().map(Application::total_demand).sum())).abs() < 1e-6
                );
            }
            Ok(())
        },
    )
}

pub fn episodes_are_seed_deterministic() -> Result<(), String> {
    check((0u64..1_000_000, 0.0f64..=1.0, 0usize..5), |(seed, f, scheme)| {
        let spec = ScenarioSpec {
            workload: GenSpec {
                seed,
                apps: 3,
                min_size: 3,
                max_size: 12,
                ..GenSpec::default()
            },
            servers: 12,
            server_capacity: 16.0,
            load: 0.7,
            ..ScenarioSpec::default()
        };
        let scenario = spec.build().unwrap();
        let scheme = SchemeSpec::ALL[scheme];
        let mut a = run_episode(
            &scenario.apps,
            &scenario.cluster,
            f,
            scheme,
            seed,
            SchemeOptions::default(),
        )
        .unwrap();
        let mut b = run_episode(
            &scenario.apps,
            &scenario.cluster,
            f,
            scheme,
            seed,
            SchemeOptions::default(),
        )
        .unwrap();
        for r in [&mut a, &mut b] {
            r.plan_ms = 0.0;
            r.sched_ms = 0.0;
        }
        prop_assert_eq!(&a, &b);
        prop_assert!((0.0..=1.0).contains(&a.avail) && (0.0..=1.0).contains(&a.util));
        prop_assert!(a.pos_dev >= 0.0 && a.neg_dev >= 0.0);
        Ok(())
    })
}
