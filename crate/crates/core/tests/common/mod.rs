#![allow(dead_code)]

use diagscale::model::AppSpec;
use diagscale::{Application, ClusterState, ReplicaKey};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Raw material for one random application: per node a parent bitmask over
/// lower indices, a tag, a demand in half units and a replica count.
#[derive(Clone, Debug)]
pub struct RawApp {
    pub nodes: Vec<(u32, u32, u32, u32)>,
    pub price: u32,
    pub with_graph: bool,
}

pub fn raw_app(max_nodes: usize, max_tag: u32) -> impl Strategy<Value = RawApp> {
    (
        prop::collection::vec((any::<u32>(), 1..=max_tag, 1u32..=8, 1u32..=2), 1..=max_nodes),
        1u32..=10,
        any::<bool>(),
    )
        .prop_map(|(nodes, price, with_graph)| RawApp {
            nodes,
            price,
            with_graph,
        })
}

pub struct BuildOptions {
    /// Raise each tag to at least every parent tag, so no microservice is
    /// more critical than any of its callers.
    pub monotone_tags: bool,
    pub unit_demand: bool,
    pub single_replica: bool,
}

pub fn build_app(id: &str, raw: &RawApp, opts: &BuildOptions) -> Application {
    let n = raw.nodes.len();
    let mut parents: Vec<Vec<usize>> = vec![Vec::new(); n];
    if raw.with_graph {
        for (i, node) in raw.nodes.iter().enumerate().skip(1) {
            // Callers are a random subset of lower indices; nodes without any
            // become extra sources.
            let mask = node.0;
            parents[i] = (0..i).filter(|&p| mask >> (p % 32) & 1 == 1).collect();
        }
    }
    let mut tags: Vec<u32> = raw.nodes.iter().map(|n| n.1).collect();
    if opts.monotone_tags {
        for i in 0..n {
            if let Some(max_parent) = parents[i].iter().map(|&p| tags[p]).max() {
                tags[i] = tags[i].max(max_parent);
            }
        }
    }
    let mut spec = AppSpec::new(id, raw.price as f64);
    for (i, node) in raw.nodes.iter().enumerate() {
        let demand = if opts.unit_demand { 1.0 } else { node.2 as f64 * 0.5 };
        spec = spec.microservice(&format!("m{i}"), demand, tags[i]);
    }
    if raw.with_graph {
        for (child, ps) in parents.iter().enumerate() {
            for &p in ps {
                spec = spec.edge(&format!("m{p}"), &format!("m{child}"));
            }
        }
    }
    let mut app = spec.build().expect("generated app is valid");
    if !opts.single_replica {
        for (i, node) in raw.nodes.iter().enumerate() {
            app.set_replicas(i, node.3).unwrap();
        }
    }
    app
}

pub fn build_apps(raws: &[RawApp], opts: &BuildOptions) -> Vec<Application> {
    raws.iter()
        .enumerate()
        .map(|(i, r)| build_app(&format!("a{i}"), r, opts))
        .collect()
}

pub const PLAIN: BuildOptions = BuildOptions {
    monotone_tags: false,
    unit_demand: false,
    single_replica: false,
};

pub const CONSISTENT: BuildOptions = BuildOptions {
    monotone_tags: true,
    unit_demand: false,
    single_replica: false,
};

/// A cluster of `sizes` with replicas placed at random where they fit, and
/// then `failed` servers knocked out.
pub fn random_cluster(apps: &[Application], sizes: &[u32], seed: u64, fail_mask: u32) -> ClusterState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = ClusterState::uniform(0, 0.0);
    if !sizes.is_empty() {
        let servers = sizes
            .iter()
            .enumerate()
            .map(|(i, &c)| diagscale::ServerNode::new(format!("s{i:02}"), c as f64))
            .collect();
        state = ClusterState::new(servers).unwrap();
    }
    let mut keys: Vec<(ReplicaKey, f64)> = apps
        .iter()
        .flat_map(|a| {
            a.microservices().iter().flat_map(move |m| {
                (0..m.replicas).map(move |r| (ReplicaKey::new(a.id(), &m.id, r), m.per_replica_demand()))
            })
        })
        .collect();
    keys.shuffle(&mut rng);
    for (key, demand) in keys {
        if rng.random_bool(0.2) || state.server_count() == 0 {
            continue;
        }
        let start = rng.random_range(0..state.server_count());
        if let Some(s) = (0..state.server_count())
            .map(|k| (start + k) % state.server_count())
            .find(|&s| state.remaining(s) >= demand)
        {
            state.place(key, s, demand).unwrap();
        }
    }
    let failed: Vec<usize> = (0..state.server_count()).filter(|&s| fail_mask >> s & 1 == 1).collect();
    state.fail_servers(&failed);
    state
}

/// Every order of `0..n` in which each node is a source or follows at least
/// one of its callers.
pub fn prefix_closed_orders(app: &Application) -> Vec<Vec<usize>> {
    let n = app.len();
    let mut out = Vec::new();
    let mut order = Vec::with_capacity(n);
    let mut used = vec![false; n];
    fn go(app: &Application, order: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        let n = used.len();
        if order.len() == n {
            out.push(order.clone());
            return;
        }
        for v in 0..n {
            if used[v] {
                continue;
            }
            let ready = match app.graph() {
                Some(g) => g.is_source(v) || g.parents(v).iter().any(|&p| used[p]),
                None => true,
            };
            if ready {
                used[v] = true;
                order.push(v);
                go(app, order, used, out);
                order.pop();
                used[v] = false;
            }
        }
    }
    go(app, &mut order, &mut used, &mut out);
    out
}

/// Water level by bisection, for cross-checking the exact sort-and-scan.
pub fn water_level_bisect(demands: &[f64], capacity: f64) -> f64 {
    let total: f64 = demands.iter().sum();
    if capacity >= total {
        return f64::INFINITY;
    }
    let (mut lo, mut hi) = (0.0f64, demands.iter().cloned().fold(0.0, f64::max));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let filled: f64 = demands.iter().map(|d| d.min(mid)).sum();
        if filled < capacity {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
