//! Synthetic workloads: layered dependency graphs with entry services,
//! long-tailed call graphs with skewed popularity, resource models and
//! criticality tagging.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use rand::distr::Distribution;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{LogNormal, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AppSpec, Application, Criticality, Microservice};
use crate::oracle::{coverage_trajectory, solve_coverage, OracleBudget};
use crate::par::{self, Execution};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ResourceModel {
    /// Demand proportional to calls per minute, with a floor.
    Cpm { scale: f64, floor: f64 },
    /// Lognormal demands rescaled to `mean_demand` per microservice.
    LongTailed { sigma: f64, mean_demand: f64 },
}

impl Default for ResourceModel {
    fn default() -> Self {
        ResourceModel::Cpm {
            scale: 0.001,
            floor: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TagKind {
    Service,
    Frequency,
}

/// Tagging scheme, written `ServiceP90`, `FreqP50` and so on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Tagging {
    pub kind: TagKind,
    pub percentile: u8,
}

impl Tagging {
    pub const SERVICE_P50: Tagging = Tagging::service(50);
    pub const SERVICE_P90: Tagging = Tagging::service(90);
    pub const FREQ_P50: Tagging = Tagging::frequency(50);
    pub const FREQ_P90: Tagging = Tagging::frequency(90);

    pub const fn service(percentile: u8) -> Self {
        Tagging {
            kind: TagKind::Service,
            percentile,
        }
    }

    pub const fn frequency(percentile: u8) -> Self {
        Tagging {
            kind: TagKind::Frequency,
            percentile,
        }
    }
}

impl fmt::Display for Tagging {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let prefix = match self.kind {
            TagKind::Service => "ServiceP",
            TagKind::Frequency => "FreqP",
        };
        write!(f, "{prefix}{}", self.percentile)
    }
}

impl FromStr for Tagging {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let (kind, rest) = if let Some(rest) = s.strip_prefix("ServiceP") {
            (TagKind::Service, rest)
        } else if let Some(rest) = s.strip_prefix("FreqP") {
            (TagKind::Frequency, rest)
        } else {
            return Err(format!(
                "unknown tagging scheme `{s}` (expected ServiceP<n> or FreqP<n>)"
            ));
        };
        match rest.parse::<u8>() {
            Ok(p) if p <= 100 => Ok(Tagging { kind, percentile: p }),
            _ => Err(format!("invalid percentile in tagging scheme `{s}`")),
        }
    }
}

impl TryFrom<String> for Tagging {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<Tagging> for String {
    fn from(t: Tagging) -> String {
        t.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSpec {
    pub seed: u64,
    pub apps: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Log-uniform application sizes instead of uniform.
    pub long_tailed: bool,
    /// Force the first application to `max_size` microservices.
    pub pin_largest: bool,
    pub max_fanout: usize,
    pub max_depth: usize,
    /// Probability that a microservice gets a second caller.
    pub extra_parent_prob: f64,
    /// Share of microservices that are entry points of services.
    pub entry_fraction: f64,
    pub call_graphs_per_microservice: f64,
    /// Zipf exponent of service popularity.
    pub service_skew: f64,
    /// Zipf exponent of call-graph request weight by rank.
    pub request_skew: f64,
    /// Pareto shape of call-graph sizes.
    pub call_graph_tail: f64,
    /// Calls per minute of the most requested call graph, per microservice
    /// of the application.
    pub request_volume: f64,
    pub resources: ResourceModel,
    pub tagging: Tagging,
    /// Share of infrequent services promoted to C1.
    pub epsilon: f64,
    pub min_price: f64,
    pub max_price: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            seed: 1,
            apps: 18,
            min_size: 10,
            max_size: 3000,
            long_tailed: true,
            pin_largest: true,
            max_fanout: 16,
            max_depth: 12,
            extra_parent_prob: 0.18,
            entry_fraction: 0.05,
            call_graphs_per_microservice: 2.0,
            service_skew: 1.1,
            request_skew: 1.5,
            call_graph_tail: 1.1,
            request_volume: 100.0,
            resources: ResourceModel::default(),
            tagging: Tagging::SERVICE_P90,
            epsilon: 0.01,
            min_price: 1.0,
            max_price: 10.0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, value: String| Err(Error::InvalidConfig(format!("{what} = {value}")));
        if self.apps == 0 {
            return bad("apps", "0 (must be positive)".into());
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return bad(
                "min_size",
                format!("{} (must be in 1..=max_size {})", self.min_size, self.max_size),
            );
        }
        if self.max_fanout == 0 || self.max_depth == 0 {
            return bad(
                "max_fanout/max_depth",
                format!("{}/{}", self.max_fanout, self.max_depth),
            );
        }
        if !(0.0..=1.0).contains(&self.extra_parent_prob) {
            return bad("extra_parent_prob", self.extra_parent_prob.to_string());
        }
        if !(self.entry_fraction > 0.0 && self.entry_fraction <= 1.0) {
            return bad("entry_fraction", self.entry_fraction.to_string());
        }
        for (what, v) in [
            ("call_graphs_per_microservice", self.call_graphs_per_microservice),
            ("service_skew", self.service_skew),
            ("request_skew", self.request_skew),
            ("call_graph_tail", self.call_graph_tail),
            ("request_volume", self.request_volume),
            ("min_price", self.min_price),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(what, v.to_string());
            }
        }
        if !(self.max_price >= self.min_price && self.max_price.is_finite()) {
            return bad("max_price", self.max_price.to_string());
        }
        if !(0.0..=0.1).contains(&self.epsilon) {
            return bad("epsilon", format!("{} (must be in [0, 0.1])", self.epsilon));
        }
        if self.tagging.percentile > 100 {
            return bad("tagging", self.tagging.to_string());
        }
        match self.resources {
            ResourceModel::Cpm { scale, floor } if !(scale > 0.0 && floor >= 0.0) => {
                bad("resources", format!("cpm scale {scale}, floor {floor}"))
            }
            ResourceModel::LongTailed { sigma, mean_demand } if !(sigma > 0.0 && mean_demand > 0.0) => {
                bad("resources", format!("long-tailed sigma {sigma}, mean {mean_demand}"))
            }
            _ => Ok(()),
        }
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn generate_workload(spec: &GenSpec) -> Result<Vec<Application>> {
    spec.validate()?;
    let width = (spec.apps - 1).to_string().len().max(2);
    let slots: Vec<usize> = (0..spec.apps).collect();
    par::map(Execution::Parallel, &slots, |&i| {
        generate_app(spec, i, &format!("app-{i:0width$}"))
    })
    .into_iter()
    .collect()
}

fn generate_app(spec: &GenSpec, slot: usize, id: &str) -> Result<Application> {
    let mut rng = stream_rng(spec.seed, 2 * slot as u64);
    let n = if spec.pin_largest && slot == 0 {
        spec.max_size
    } else if spec.long_tailed {
        let (lo, hi) = ((spec.min_size as f64).ln(), (spec.max_size as f64 + 1.0).ln());
        (rng.random_range(lo..=hi).exp().floor() as usize).clamp(spec.min_size, spec.max_size)
    } else {
        rng.random_range(spec.min_size..=spec.max_size)
    };
    let price = (rng.random_range(spec.min_price..=spec.max_price) * 100.0).round() / 100.0;

    let entries = ((n as f64 * spec.entry_fraction).round() as usize).clamp(1, n);
    let mut depth = vec![0usize; n];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut edges = Vec::new();
    for node in entries..n {
        let mut parent = None;
        for _ in 0..8 {
            let p = rng.random_range(0..node);
            if depth[p] + 1 < spec.max_depth && children[p].len() < spec.max_fanout {
                parent = Some(p);
                break;
            }
        }
        let p = parent.unwrap_or_else(|| rng.random_range(0..entries.min(node)));
        depth[node] = depth[p] + 1;
        children[p].push(node);
        edges.push((p, node));
        if node > 1 && rng.random_bool(spec.extra_parent_prob) {
            let q = rng.random_range(0..node);
            if q != p {
                children[q].push(node);
                edges.push((q, node));
            }
        }
    }

    // Services ranked by a random permutation of their entry points.
    let mut service_rank: Vec<usize> = (0..entries).collect();
    service_rank.shuffle(&mut rng);
    let popularity = Zipf::new(entries as f64, spec.service_skew).expect("valid zipf");
    let graphs = ((n as f64 * spec.call_graphs_per_microservice).round() as usize).max(1);
    let mut merged: BTreeMap<Vec<usize>, u64> = BTreeMap::new();
    for rank in 1..=graphs {
        let service = service_rank[popularity.sample(&mut rng) as usize - 1];
        let u: f64 = rng.random_range(f64::EPSILON..1.0);
        let size = (u.powf(-1.0 / spec.call_graph_tail).floor() as usize).clamp(1, n);
        let mut members = vec![service];
        let mut frontier: Vec<usize> = children[service].clone();
        while members.len() < size && !frontier.is_empty() {
            let next = frontier.swap_remove(rng.random_range(0..frontier.len()));
            if !members.contains(&next) {
                members.push(next);
                frontier.extend_from_slice(&children[next]);
            }
        }
        members.sort_unstable();
        let weight = ((spec.request_volume * n as f64 / (rank as f64).powf(spec.request_skew)).round() as u64).max(1);
        *merged.entry(members).or_default() += weight;
    }

    // Labels are a random permutation so that id order says nothing about
    // the graph.
    let width = (n - 1).to_string().len().max(4);
    let mut labels: Vec<usize> = (0..n).collect();
    labels.shuffle(&mut rng);
    let name = |i: usize| format!("ms-{:0width$}", labels[i]);
    let spec_app = AppSpec {
        id: id.to_string(),
        price_per_unit: price,
        microservices: (0..n).map(|i| Microservice::new(name(i), 1.0, 1)).collect(),
        edges: Some(edges.iter().map(|&(a, b)| (name(a), name(b))).collect()),
        call_graphs: Some(
            merged
                .into_iter()
                .map(|(members, w)| (members.into_iter().map(name).collect(), w))
                .collect(),
        ),
    };
    let app = spec_app.build()?;

    let app = match spec.resources {
        ResourceModel::Cpm { scale, floor } => assign_resources_cpm(&app, &call_rates(&app), scale, floor)?,
        ResourceModel::LongTailed { sigma, mean_demand } => {
            assign_resources_longtailed(&app, spec.seed ^ ((slot as u64) << 32), sigma, mean_demand * n as f64)?
        }
    };
    let tag_seed = spec.seed.wrapping_add(2 * slot as u64 + 1);
    let p = spec.tagging.percentile as f64;
    Ok(match spec.tagging.kind {
        TagKind::Service => tag_service_level(&app, p, spec.epsilon, tag_seed),
        TagKind::Frequency => tag_frequency_based(&app, p, spec.epsilon, tag_seed, OracleBudget::default()),
    })
}

/// Calls per minute of every microservice, from its call graphs.
pub fn call_rates(app: &Application) -> BTreeMap<String, f64> {
    app.microservices()
        .iter()
        .zip(app.call_frequencies())
        .map(|(m, f)| (m.id.clone(), f as f64))
        .collect()
}

/// `demand = max(scale * cpm, floor)`; microservices missing from `cpm` count
/// as idle.
pub fn assign_resources_cpm(
    app: &Application,
    cpm: &BTreeMap<String, f64>,
    scale: f64,
    floor: f64,
) -> Result<Application> {
    let mut out = app.clone();
    for (i, m) in app.microservices().iter().enumerate() {
        let rate = cpm.get(&m.id).copied().unwrap_or(0.0);
        if !(rate.is_finite() && rate >= 0.0) {
            return Err(Error::InvalidConfig(format!("cpm of `{}` is {rate}", m.id)));
        }
        out.set_demand(i, (scale * rate).max(floor))?;
    }
    Ok(out)
}

/// Lognormal demands with unit median, rescaled to sum to `target_total`.
pub fn assign_resources_longtailed(app: &Application, seed: u64, sigma: f64, target_total: f64) -> Result<Application> {
    let dist = LogNormal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(format!("lognormal: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<f64> = (0..app.len()).map(|_| dist.sample(&mut rng)).collect();
    let sum: f64 = draws.iter().sum();
    let mut out = app.clone();
    for (i, d) in draws.into_iter().enumerate() {
        out.set_demand(i, d * target_total / sum)?;
    }
    Ok(out)
}

/// Calls-per-minute table from CSV with header `ms_id,cpm`.
pub fn load_frequencies<R: Read>(source: R) -> Result<BTreeMap<String, f64>> {
    #[derive(Deserialize)]
    struct Row {
        ms_id: String,
        cpm: f64,
    }
    let mut reader = csv::Reader::from_reader(source);
    let mut out = BTreeMap::new();
    for row in reader.deserialize() {
        let row: Row = row?;
        if !(row.cpm.is_finite() && row.cpm >= 0.0) {
            return Err(Error::InvalidConfig(format!("cpm of `{}` is {}", row.ms_id, row.cpm)));
        }
        out.insert(row.ms_id, row.cpm);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Tagging

/// Call graphs grouped by entry point: the first member that is a source of
/// the dependency graph, else the smallest member.
pub fn services(app: &Application) -> BTreeMap<usize, Vec<usize>> {
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (g, cg) in app.call_graphs().unwrap_or(&[]).iter().enumerate() {
        let entry = app
            .graph()
            .and_then(|graph| cg.members.iter().copied().find(|&m| graph.is_source(m)))
            .unwrap_or(cg.members[0]);
        out.entry(entry).or_default().push(g);
    }
    out
}

fn reaches(weight: u64, total: u64, percentile: f64) -> bool {
    weight as f64 * 100.0 >= percentile * total as f64 - 1e-6
}

/// Union of the most requested services covering `percentile`% of weight.
pub fn service_c1_set(app: &Application, percentile: f64) -> Vec<bool> {
    let graphs = app.call_graphs().unwrap_or(&[]);
    let total: u64 = graphs.iter().map(|cg| cg.weight).sum();
    let mut ranked: Vec<(u64, usize, Vec<usize>)> = services(app)
        .into_iter()
        .map(|(entry, gs)| (gs.iter().map(|&g| graphs[g].weight).sum(), entry, gs))
        .collect();
    ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut c1 = vec![false; app.len()];
    let mut covered = 0;
    for (w, _, gs) in ranked {
        if reaches(covered, total, percentile) {
            break;
        }
        covered += w;
        for g in gs {
            for &m in &graphs[g].members {
                c1[m] = true;
            }
        }
    }
    c1
}

/// Smallest microservice set found whose fully covered call-graph weight
/// reaches `percentile`%: exact coverage when the candidates fit `budget`,
/// otherwise the shortest sufficient prefix of the greedy trajectory.
pub fn frequency_c1_set(app: &Application, percentile: f64, budget: OracleBudget) -> Vec<bool> {
    let graphs = app.call_graphs().unwrap_or(&[]);
    let total: u64 = graphs.iter().map(|cg| cg.weight).sum();
    let mut c1 = vec![false; app.len()];
    let exact = (0..=app.len()).find_map(|k| match solve_coverage(app, k, budget) {
        Ok(c) if reaches(c.weight, total, percentile) => Some(Some(c.members)),
        Ok(_) => None,
        Err(_) => Some(None),
    });
    let members = match exact.flatten() {
        Some(m) => m,
        None => coverage_trajectory(app, usize::MAX)
            .into_iter()
            .find(|c| reaches(c.weight, total, percentile))
            .map(|c| c.members)
            .unwrap_or_else(|| (0..app.len()).collect()),
    };
    for m in members {
        c1[m] = true;
    }
    c1
}

pub fn tag_service_level(app: &Application, percentile: f64, epsilon: f64, seed: u64) -> Application {
    let mut c1 = service_c1_set(app, percentile);
    promote_background(app, &mut c1, epsilon, seed);
    apply_tags(app, &c1)
}

pub fn tag_frequency_based(
    app: &Application,
    percentile: f64,
    epsilon: f64,
    seed: u64,
    budget: OracleBudget,
) -> Application {
    let mut c1 = frequency_c1_set(app, percentile, budget);
    promote_background(app, &mut c1, epsilon, seed);
    apply_tags(app, &c1)
}

/// Marks every microservice of `round(epsilon * services)` randomly chosen
/// services outside the C1 set as C1.
fn promote_background(app: &Application, c1: &mut [bool], epsilon: f64, seed: u64) {
    let graphs = app.call_graphs().unwrap_or(&[]);
    let all = services(app);
    let count = (epsilon * all.len() as f64).round() as usize;
    let outside: Vec<&Vec<usize>> = all.values().filter(|gs| !c1[graphs[gs[0]].members[0]]).collect();
    if count == 0 || outside.is_empty() {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for pick in index::sample(&mut rng, outside.len(), count.min(outside.len())) {
        for &g in outside[pick] {
            for &m in &graphs[g].members {
                c1[m] = true;
            }
        }
    }
}

/// C1 for the chosen set; the rest get C2..C5 by descending call-frequency
/// quartile. Afterwards no non-C1 microservice is more critical than its
/// most critical caller, so criticality never contradicts the graph.
fn apply_tags(app: &Application, c1: &[bool]) -> Application {
    let freq = app.call_frequencies();
    let mut rest: Vec<usize> = (0..app.len()).filter(|&m| !c1[m]).collect();
    rest.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then(a.cmp(&b)));
    let mut tags = vec![1u32; app.len()];
    for (pos, &m) in rest.iter().enumerate() {
        tags[m] = 2 + (4 * pos / rest.len()) as u32;
    }
    if let Some(graph) = app.graph() {
        for m in graph.topological_order() {
            if tags[m] > 1 {
                if let Some(floor) = graph.parents(m).iter().map(|&p| tags[p]).min() {
                    tags[m] = tags[m].max(floor);
                }
            }
        }
    }
    let mut out = app.clone();
    for (m, t) in tags.into_iter().enumerate() {
        out.set_tag(m, Criticality::new(t).expect("tags start at 1"));
    }
    out
}
