//! Workload and cluster data model.
//!
//! Applications are canonicalized on construction: microservices sorted by id,
//! edges deduplicated and sorted, call-graph members sorted. Everything that
//! depends on iteration order downstream (tie-breaks, serialization) inherits
//! that order, so identical inputs always produce identical outputs.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fmt;
use std::io::Read;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, StateViolation, ValidationError};

/// Absolute slack used for every capacity comparison.
pub const EPS: f64 = 1e-9;

/// Criticality level; 1 is the most critical.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Criticality(u32);

impl Criticality {
    pub const MOST_CRITICAL: Criticality = Criticality(1);

    pub fn new(level: u32) -> Option<Self> {
        (level >= 1).then_some(Criticality(level))
    }

    pub fn level(self) -> u32 {
        self.0
    }

    pub fn is_most_critical(self) -> bool {
        self.0 == 1
    }
}

impl Default for Criticality {
    fn default() -> Self {
        Self::MOST_CRITICAL
    }
}

impl fmt::Display for Criticality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "C{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Microservice {
    pub id: String,
    /// Total demand across all replicas.
    pub demand: f64,
    pub tag: Criticality,
    pub replicas: u32,
}

impl Microservice {
    pub fn new(id: impl Into<String>, demand: f64, tag: u32) -> Self {
        Microservice {
            id: id.into(),
            demand,
            tag: Criticality::new(tag).unwrap_or_default(),
            replicas: 1,
        }
    }

    pub fn with_replicas(mut self, replicas: u32) -> Self {
        self.replicas = replicas;
        self
    }

    pub fn per_replica_demand(&self) -> f64 {
        self.demand / f64::from(self.replicas)
    }
}

/// Caller -> callee relations, stored as indices into the owning application's
/// microservice list.
#[derive(Clone, Debug, PartialEq)]
pub struct DependencyGraph {
    edges: Vec<(usize, usize)>,
    children: Vec<Vec<usize>>,
    parents: Vec<Vec<usize>>,
}

impl DependencyGraph {
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn children(&self, node: usize) -> &[usize] {
        &self.children[node]
    }

    pub fn parents(&self, node: usize) -> &[usize] {
        &self.parents[node]
    }

    pub fn is_source(&self, node: usize) -> bool {
        self.parents[node].is_empty()
    }

    pub fn sources(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.parents.len()).filter(|&n| self.parents[n].is_empty())
    }

    pub fn node_count(&self) -> usize {
        self.parents.len()
    }

    /// Kahn's algorithm, always releasing the smallest ready index first.
    pub fn topological_order(&self) -> Vec<usize> {
        let n = self.node_count();
        let mut indegree: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        let mut ready: BinaryHeap<Reverse<usize>> = (0..n).filter(|&j| indegree[j] == 0).map(Reverse).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(Reverse(j)) = ready.pop() {
            order.push(j);
            for &c in &self.children[j] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.push(Reverse(c));
                }
            }
        }
        order
    }
}

/// The microservices exercised by one kind of user request.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CallGraph {
    /// Sorted, deduplicated microservice indices.
    pub members: Vec<usize>,
    /// Number of requests this call graph represents.
    pub weight: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Application {
    id: String,
    price_per_unit: f64,
    microservices: Vec<Microservice>,
    index: HashMap<String, usize>,
    graph: Option<DependencyGraph>,
    call_graphs: Option<Vec<CallGraph>>,
}

/// Unvalidated application description, keyed by microservice id.
#[derive(Clone, Debug, Default)]
pub struct AppSpec {
    pub id: String,
    pub price_per_unit: f64,
    pub microservices: Vec<Microservice>,
    pub edges: Option<Vec<(String, String)>>,
    pub call_graphs: Option<Vec<(Vec<String>, u64)>>,
}

impl AppSpec {
    pub fn new(id: impl Into<String>, price_per_unit: f64) -> Self {
        AppSpec {
            id: id.into(),
            price_per_unit,
            ..Default::default()
        }
    }

    pub fn microservice(mut self, id: &str, demand: f64, tag: u32) -> Self {
        self.microservices.push(Microservice::new(id, demand, tag));
        self
    }

    pub fn edge(mut self, caller: &str, callee: &str) -> Self {
        self.edges
            .get_or_insert_with(Vec::new)
            .push((caller.to_string(), callee.to_string()));
        self
    }

    pub fn call_graph(mut self, nodes: &[&str], weight: u64) -> Self {
        self.call_graphs
            .get_or_insert_with(Vec::new)
            .push((nodes.iter().map(|s| s.to_string()).collect(), weight));
        self
    }

    pub fn build(self) -> Result<Application, ValidationError> {
        Application::from_spec(self)
    }
}

impl Application {
    pub fn from_spec(spec: AppSpec) -> Result<Self, ValidationError> {
        let AppSpec {
            id,
            price_per_unit,
            mut microservices,
            edges,
            call_graphs,
        } = spec;
        if !(price_per_unit.is_finite() && price_per_unit >= 0.0) {
            return Err(ValidationError::InvalidPrice {
                app: id,
                price: price_per_unit,
            });
        }
        microservices.sort_by(|a, b| a.id.cmp(&b.id));
        let mut index = HashMap::with_capacity(microservices.len());
        for (i, ms) in microservices.iter().enumerate() {
            if !(ms.demand.is_finite() && ms.demand >= 0.0) {
                return Err(ValidationError::InvalidDemand {
                    app: id,
                    ms: ms.id.clone(),
                    demand: ms.demand,
                });
            }
            if ms.replicas == 0 {
                return Err(ValidationError::ZeroReplicas {
                    app: id,
                    ms: ms.id.clone(),
                });
            }
            if index.insert(ms.id.clone(), i).is_some() {
                return Err(ValidationError::DuplicateMicroservice {
                    app: id,
                    ms: ms.id.clone(),
                });
            }
        }

        let graph = match edges {
            None => None,
            Some(edges) => {
                let mut resolved = Vec::with_capacity(edges.len());
                for (caller, callee) in edges {
                    let lookup = |name: &str| index.get(name).copied();
                    match (lookup(&caller), lookup(&callee)) {
                        (Some(a), Some(b)) => resolved.push((a, b)),
                        (a, _) => {
                            let missing = if a.is_none() { caller.clone() } else { callee.clone() };
                            return Err(ValidationError::DanglingEdge {
                                app: id,
                                caller,
                                callee,
                                missing,
                            });
                        }
                    }
                }
                resolved.sort_unstable();
                resolved.dedup();
                Some(build_graph(&id, &microservices, resolved)?)
            }
        };

        let call_graphs = match call_graphs {
            None => None,
            Some(cgs) => {
                let mut out = Vec::with_capacity(cgs.len());
                for (i, (nodes, weight)) in cgs.into_iter().enumerate() {
                    let invalid = |reason: String| ValidationError::InvalidCallGraph {
                        app: id.clone(),
                        index: i,
                        reason,
                    };
                    if nodes.is_empty() {
                        return Err(invalid("has no microservices".into()));
                    }
                    if weight == 0 {
                        return Err(invalid("has zero weight".into()));
                    }
                    let mut members = Vec::with_capacity(nodes.len());
                    for n in &nodes {
                        match index.get(n) {
                            Some(&k) => members.push(k),
                            None => return Err(invalid(format!("names unknown microservice `{n}`"))),
                        }
                    }
                    members.sort_unstable();
                    members.dedup();
                    out.push(CallGraph { members, weight });
                }
                out.sort_by(|a, b| a.members.cmp(&b.members).then(a.weight.cmp(&b.weight)));
                Some(out)
            }
        };

        Ok(Application {
            id,
            price_per_unit,
            microservices,
            index,
            graph,
            call_graphs,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn price_per_unit(&self) -> f64 {
        self.price_per_unit
    }

    pub fn microservices(&self) -> &[Microservice] {
        &self.microservices
    }

    pub fn microservice(&self, idx: usize) -> &Microservice {
        &self.microservices[idx]
    }

    pub fn index_of(&self, ms_id: &str) -> Option<usize> {
        self.index.get(ms_id).copied()
    }

    pub fn len(&self) -> usize {
        self.microservices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.microservices.is_empty()
    }

    pub fn graph(&self) -> Option<&DependencyGraph> {
        self.graph.as_ref()
    }

    pub fn call_graphs(&self) -> Option<&[CallGraph]> {
        self.call_graphs.as_deref()
    }

    pub fn total_demand(&self) -> f64 {
        self.microservices.iter().map(|m| m.demand).sum()
    }

    pub fn set_price(&mut self, price: f64) -> Result<(), ValidationError> {
        if !(price.is_finite() && price >= 0.0) {
            return Err(ValidationError::InvalidPrice {
                app: self.id.clone(),
                price,
            });
        }
        self.price_per_unit = price;
        Ok(())
    }

    pub fn set_demand(&mut self, idx: usize, demand: f64) -> Result<(), ValidationError> {
        if !(demand.is_finite() && demand >= 0.0) {
            return Err(ValidationError::InvalidDemand {
                app: self.id.clone(),
                ms: self.microservices[idx].id.clone(),
                demand,
            });
        }
        self.microservices[idx].demand = demand;
        Ok(())
    }

    pub fn set_tag(&mut self, idx: usize, tag: Criticality) {
        self.microservices[idx].tag = tag;
    }

    pub fn set_replicas(&mut self, idx: usize, replicas: u32) -> Result<(), ValidationError> {
        if replicas == 0 {
            return Err(ValidationError::ZeroReplicas {
                app: self.id.clone(),
                ms: self.microservices[idx].id.clone(),
            });
        }
        self.microservices[idx].replicas = replicas;
        Ok(())
    }

    /// Requests per microservice: sum of weights of call graphs containing it.
    pub fn call_frequencies(&self) -> Vec<u64> {
        let mut freq = vec![0u64; self.len()];
        for cg in self.call_graphs().unwrap_or_default() {
            for &m in &cg.members {
                freq[m] += cg.weight;
            }
        }
        freq
    }

    pub fn to_spec(&self) -> AppSpec {
        let ids = |v: &[usize]| v.iter().map(|&i| self.microservices[i].id.clone()).collect();
        AppSpec {
            id: self.id.clone(),
            price_per_unit: self.price_per_unit,
            microservices: self.microservices.clone(),
            edges: self.graph.as_ref().map(|g| {
                g.edges
                    .iter()
                    .map(|&(a, b)| (self.microservices[a].id.clone(), self.microservices[b].id.clone()))
                    .collect()
            }),
            call_graphs: self
                .call_graphs
                .as_ref()
                .map(|cgs| cgs.iter().map(|cg| (ids(&cg.members), cg.weight)).collect()),
        }
    }
}

fn build_graph(
    app: &str,
    microservices: &[Microservice],
    edges: Vec<(usize, usize)>,
) -> Result<DependencyGraph, ValidationError> {
    let n = microservices.len();
    let mut children = vec![Vec::new(); n];
    let mut parents = vec![Vec::new(); n];
    for &(a, b) in &edges {
        children[a].push(b);
        parents[b].push(a);
    }

    // Kahn's algorithm; leftover nodes sit on or behind a cycle.
    let mut indegree: Vec<usize> = parents.iter().map(Vec::len).collect();
    let mut ready: Vec<usize> = (0..n).filter(|&v| indegree[v] == 0).collect();
    let mut seen = 0;
    while let Some(v) = ready.pop() {
        seen += 1;
        for &c in &children[v] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.push(c);
            }
        }
    }
    if seen < n {
        let cycle = find_cycle(&children, &indegree)
            .into_iter()
            .map(|v| microservices[v].id.clone())
            .collect();
        return Err(ValidationError::Cycle {
            app: app.to_string(),
            cycle,
        });
    }
    Ok(DependencyGraph {
        edges,
        children,
        parents,
    })
}

/// Walks predecessor-free leftovers of Kahn's algorithm until a node repeats.
fn find_cycle(children: &[Vec<usize>], indegree: &[usize]) -> Vec<usize> {
    let Some(start) = (0..children.len()).find(|&v| indegree[v] > 0) else {
        return Vec::new();
    };
    let mut pos = HashMap::new();
    let mut path = Vec::new();
    let mut v = start;
    loop {
        if let Some(&p) = pos.get(&v) {
            let mut cycle: Vec<usize> = path[p..].to_vec();
            cycle.push(v);
            return cycle;
        }
        pos.insert(v, path.len());
        path.push(v);
        // Every leftover node has a leftover child, otherwise Kahn would have consumed it.
        v = *children[v]
            .iter()
            .find(|&&c| indegree[c] > 0)
            .expect("leftover node without leftover child");
    }
}

// ---------------------------------------------------------------------------
// workload-json

#[derive(Serialize, Deserialize)]
struct WorkloadDoc {
    applications: Vec<AppDoc>,
}

#[derive(Serialize, Deserialize)]
struct AppDoc {
    id: String,
    price_per_unit: f64,
    microservices: Vec<MicroserviceDoc>,
    #[serde(default)]
    edges: Option<Vec<(String, String)>>,
    #[serde(default)]
    call_graphs: Option<Vec<CallGraphDoc>>,
}

#[derive(Serialize, Deserialize)]
struct MicroserviceDoc {
    id: String,
    demand: f64,
    #[serde(default)]
    tag: Option<u32>,
    #[serde(default = "one")]
    replicas: u32,
}

#[derive(Serialize, Deserialize)]
struct CallGraphDoc {
    nodes: Vec<String>,
    weight: u64,
}

fn one() -> u32 {
    1
}

/// Parses and validates a workload-json document. Untagged microservices are
/// treated as most critical.
pub fn load_workload<R: Read>(source: R) -> Result<Vec<Application>> {
    let doc: WorkloadDoc = serde_json::from_reader(source)?;
    let mut apps = Vec::with_capacity(doc.applications.len());
    for app in doc.applications {
        let mut microservices = Vec::with_capacity(app.microservices.len());
        for ms in app.microservices {
            let tag = match ms.tag {
                None => Criticality::MOST_CRITICAL,
                Some(level) => Criticality::new(level).ok_or_else(|| ValidationError::ZeroTag {
                    app: app.id.clone(),
                    ms: ms.id.clone(),
                })?,
            };
            microservices.push(Microservice {
                id: ms.id,
                demand: ms.demand,
                tag,
                replicas: ms.replicas,
            });
        }
        apps.push(Application::from_spec(AppSpec {
            id: app.id,
            price_per_unit: app.price_per_unit,
            microservices,
            edges: app.edges,
            call_graphs: app
                .call_graphs
                .map(|cgs| cgs.into_iter().map(|c| (c.nodes, c.weight)).collect()),
        })?);
    }
    canonicalize_apps(&mut apps)?;
    Ok(apps)
}

pub fn load_workload_str(source: &str) -> Result<Vec<Application>> {
    load_workload(source.as_bytes())
}

/// Sorts applications by id and rejects duplicates.
pub fn canonicalize_apps(apps: &mut [Application]) -> Result<(), ValidationError> {
    apps.sort_by(|a, b| a.id.cmp(&b.id));
    for pair in apps.windows(2) {
        if pair[0].id == pair[1].id {
            return Err(ValidationError::DuplicateApp(pair[0].id.clone()));
        }
    }
    Ok(())
}

/// Canonical, byte-deterministic workload-json.
pub fn save_workload(apps: &[Application]) -> Vec<u8> {
    let mut sorted: Vec<&Application> = apps.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let doc = WorkloadDoc {
        applications: sorted
            .into_iter()
            .map(|app| {
                let spec = app.to_spec();
                AppDoc {
                    id: spec.id,
                    price_per_unit: spec.price_per_unit,
                    microservices: spec
                        .microservices
                        .into_iter()
                        .map(|m| MicroserviceDoc {
                            id: m.id,
                            demand: m.demand,
                            tag: Some(m.tag.level()),
                            replicas: m.replicas,
                        })
                        .collect(),
                    edges: spec.edges,
                    call_graphs: spec.call_graphs.map(|cgs| {
                        cgs.into_iter()
                            .map(|(nodes, weight)| CallGraphDoc { nodes, weight })
                            .collect()
                    }),
                }
            })
            .collect(),
    };
    let mut out = serde_json::to_vec_pretty(&doc).expect("workload document serializes");
    out.push(b'\n');
    out
}

// ---------------------------------------------------------------------------
// Cluster

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerNode {
    pub id: String,
    pub capacity: f64,
    #[serde(default = "truth", skip_serializing_if = "is_true")]
    pub healthy: bool,
}

fn truth() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

impl ServerNode {
    pub fn new(id: impl Into<String>, capacity: f64) -> Self {
        ServerNode {
            id: id.into(),
            capacity,
            healthy: true,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ClusterDoc {
    servers: Vec<ServerNode>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    assignment: Vec<AssignmentDoc>,
}

#[derive(Serialize, Deserialize)]
struct AssignmentDoc {
    app: String,
    microservice: String,
    replica: u32,
    server: String,
    demand: f64,
}

/// Parses a cluster document: servers and, optionally, the replicas running
/// on them.
pub fn load_cluster<R: Read>(source: R) -> Result<ClusterState> {
    let doc: ClusterDoc = serde_json::from_reader(source)?;
    let mut state = ClusterState::new(doc.servers)?;
    for a in doc.assignment {
        let server = state
            .server_index(&a.server)
            .ok_or_else(|| StateViolation::UnknownServerId(a.server.clone()))?;
        state.place(ReplicaKey::new(&a.app, &a.microservice, a.replica), server, a.demand)?;
    }
    Ok(state)
}

pub fn save_cluster(state: &ClusterState) -> Vec<u8> {
    let doc = ClusterDoc {
        servers: state.servers.clone(),
        assignment: state
            .assignment
            .iter()
            .map(|(key, p)| AssignmentDoc {
                app: key.app.to_string(),
                microservice: key.ms.to_string(),
                replica: key.replica,
                server: state.servers[p.server].id.clone(),
                demand: p.demand,
            })
            .collect(),
    };
    let mut out = serde_json::to_vec_pretty(&doc).expect("cluster document serializes");
    out.push(b'\n');
    out
}

/// Identifies one replica of one microservice.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ReplicaKey {
    pub app: Arc<str>,
    pub ms: Arc<str>,
    pub replica: u32,
}

impl ReplicaKey {
    pub fn new(app: &str, ms: &str, replica: u32) -> Self {
        ReplicaKey {
            app: Arc::from(app),
            ms: Arc::from(ms),
            replica,
        }
    }
}

impl fmt::Display for ReplicaKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}#{}", self.app, self.ms, self.replica)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub server: usize,
    pub demand: f64,
}

/// Servers plus the replica -> server assignment. All mutations go through
/// methods that keep the capacity and health invariants.
#[derive(Clone, Debug)]
pub struct ClusterState {
    servers: Vec<ServerNode>,
    server_index: HashMap<String, usize>,
    used: Vec<f64>,
    assignment: BTreeMap<ReplicaKey, Placement>,
}

impl ClusterState {
    pub fn new(mut servers: Vec<ServerNode>) -> Result<Self, ValidationError> {
        servers.sort_by(|a, b| a.id.cmp(&b.id));
        let mut server_index = HashMap::with_capacity(servers.len());
        for (i, s) in servers.iter().enumerate() {
            if !(s.capacity.is_finite() && s.capacity >= 0.0) {
                return Err(ValidationError::InvalidCapacity {
                    server: s.id.clone(),
                    capacity: s.capacity,
                });
            }
            if server_index.insert(s.id.clone(), i).is_some() {
                return Err(ValidationError::DuplicateServer(s.id.clone()));
            }
        }
        let used = vec![0.0; servers.len()];
        Ok(ClusterState {
            servers,
            server_index,
            used,
            assignment: BTreeMap::new(),
        })
    }

    /// `count` identical servers named `node-000..`, zero-padded so id order
    /// matches numeric order.
    pub fn uniform(count: usize, capacity: f64) -> Self {
        let width = count.saturating_sub(1).to_string().len().max(3);
        let servers = (0..count)
            .map(|i| ServerNode::new(format!("node-{i:0width$}"), capacity))
            .collect();
        ClusterState::new(servers).expect("uniform cluster is valid")
    }

    pub fn servers(&self) -> &[ServerNode] {
        &self.servers
    }

    pub fn server_count(&self) -> usize {
        self.servers.len()
    }

    pub fn server_index(&self, id: &str) -> Option<usize> {
        self.server_index.get(id).copied()
    }

    pub fn used(&self, server: usize) -> f64 {
        self.used[server]
    }

    pub fn remaining(&self, server: usize) -> f64 {
        self.servers[server].capacity - self.used[server]
    }

    pub fn total_capacity(&self) -> f64 {
        self.servers.iter().map(|s| s.capacity).sum()
    }

    pub fn healthy_capacity(&self) -> f64 {
        self.servers.iter().filter(|s| s.healthy).map(|s| s.capacity).sum()
    }

    pub fn total_used(&self) -> f64 {
        self.used.iter().sum()
    }

    pub fn assignment(&self) -> &BTreeMap<ReplicaKey, Placement> {
        &self.assignment
    }

    pub fn placement(&self, key: &ReplicaKey) -> Option<Placement> {
        self.assignment.get(key).copied()
    }

    pub fn place(&mut self, key: ReplicaKey, server: usize, demand: f64) -> Result<(), StateViolation> {
        let node = self.servers.get(server).ok_or(StateViolation::UnknownServer(server))?;
        if !node.healthy {
            return Err(StateViolation::UnhealthyServer(node.id.clone()));
        }
        if self.used[server] + demand > node.capacity + EPS {
            return Err(StateViolation::OverCapacity {
                server: node.id.clone(),
                used: self.used[server] + demand,
                capacity: node.capacity,
            });
        }
        if self.assignment.contains_key(&key) {
            return Err(StateViolation::AlreadyAssigned(key.to_string()));
        }
        self.used[server] += demand;
        self.assignment.insert(key, Placement { server, demand });
        Ok(())
    }

    pub fn unplace(&mut self, key: &ReplicaKey) -> Option<Placement> {
        let p = self.assignment.remove(key)?;
        self.used[p.server] -= p.demand;
        if self.used[p.server].abs() < EPS {
            self.used[p.server] = 0.0;
        }
        Some(p)
    }

    /// Marks a server unhealthy and evicts everything on it.
    pub fn fail_server(&mut self, server: usize) -> Vec<ReplicaKey> {
        self.servers[server].healthy = false;
        let evicted: Vec<ReplicaKey> = self
            .assignment
            .iter()
            .filter(|(_, p)| p.server == server)
            .map(|(k, _)| k.clone())
            .collect();
        for k in &evicted {
            self.assignment.remove(k);
        }
        self.used[server] = 0.0;
        evicted
    }

    /// Fails many servers with a single pass over the assignment.
    pub fn fail_servers(&mut self, servers: &[usize]) -> usize {
        let mut down = vec![false; self.servers.len()];
        for &s in servers {
            down[s] = true;
            self.servers[s].healthy = false;
            self.used[s] = 0.0;
        }
        let before = self.assignment.len();
        self.assignment.retain(|_, p| !down[p.server]);
        before - self.assignment.len()
    }

    pub fn revive_server(&mut self, server: usize) {
        self.servers[server].healthy = true;
    }

    /// Recomputes usage from the assignment and checks every invariant.
    pub fn validate(&self) -> Result<(), StateViolation> {
        let mut actual = vec![0.0; self.servers.len()];
        for (key, p) in &self.assignment {
            let node = self
                .servers
                .get(p.server)
                .ok_or(StateViolation::UnknownServer(p.server))?;
            if !node.healthy {
                return Err(StateViolation::UnhealthyServer(format!("{} (holding {key})", node.id)));
            }
            actual[p.server] += p.demand;
        }
        for (i, node) in self.servers.iter().enumerate() {
            let tol = EPS * (1.0 + node.capacity.abs()) * 16.0;
            if actual[i] > node.capacity + tol {
                return Err(StateViolation::OverCapacity {
                    server: node.id.clone(),
                    used: actual[i],
                    capacity: node.capacity,
                });
            }
            if (actual[i] - self.used[i]).abs() > tol {
                return Err(StateViolation::UsageDrift {
                    server: node.id.clone(),
                    cached: self.used[i],
                    actual: actual[i],
                });
            }
        }
        Ok(())
    }

    /// `validate` plus agreement with the workload: every replica names an
    /// existing microservice and records its per-replica demand.
    pub fn validate_against(&self, apps: &[Application]) -> Result<(), StateViolation> {
        self.validate()?;
        let by_id: HashMap<&str, &Application> = apps.iter().map(|a| (a.id(), a)).collect();
        for (key, p) in &self.assignment {
            let ms = by_id
                .get(&*key.app)
                .and_then(|a| a.index_of(&key.ms).map(|i| a.microservice(i)))
                .filter(|ms| key.replica < ms.replicas)
                .ok_or_else(|| StateViolation::UnknownReplica(key.to_string()))?;
            let expected = ms.per_replica_demand();
            if (expected - p.demand).abs() > EPS * (1.0 + expected.abs()) * 16.0 {
                return Err(StateViolation::DemandMismatch {
                    key: key.to_string(),
                    recorded: p.demand,
                    expected,
                });
            }
        }
        Ok(())
    }

    /// Number of assigned replicas per (app, microservice).
    pub fn running_replicas(&self) -> HashMap<(&str, &str), u32> {
        let mut out: HashMap<(&str, &str), u32> = HashMap::new();
        for key in self.assignment.keys() {
            *out.entry((&*key.app, &*key.ms)).or_default() += 1;
        }
        out
    }
}

impl PartialEq for ClusterState {
    fn eq(&self, other: &Self) -> bool {
        self.servers == other.servers && self.assignment == other.assignment
    }
}
