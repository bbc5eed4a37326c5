use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::model::ValidationReport;
use crate::value::{Ident, Millis};

pub const DEFAULT_DEVICE_FOG_LATENCY_MS: Millis = 1;
pub const DEFAULT_FOG_FOG_LATENCY_MS: Millis = 2;
pub const DEFAULT_FOG_CLOUD_LATENCY_MS: Millis = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Device,
    Fog,
    Cloud,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Device => "device",
            Tier::Fog => "fog",
            Tier::Cloud => "cloud",
        })
    }
}

impl Tier {
    /// Default one-way latency for a link between two tiers.
    pub fn default_latency(a: Tier, b: Tier) -> Millis {
        use Tier::*;
        match (a.min(b), a.max(b)) {
            (Device, Device) | (Device, Fog) => DEFAULT_DEVICE_FOG_LATENCY_MS,
            (Device, Cloud) => DEFAULT_DEVICE_FOG_LATENCY_MS + DEFAULT_FOG_CLOUD_LATENCY_MS,
            (Fog, Fog) => DEFAULT_FOG_FOG_LATENCY_MS,
            (Fog, Cloud) => DEFAULT_FOG_CLOUD_LATENCY_MS,
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Node {
    pub id: String,
    pub tier: Tier,
    /// Device services hosted on a device-tier node.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hosts: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Link {
    pub a: String,
    pub b: String,
    pub latency_ms: Millis,
    #[serde(default)]
    pub jitter_ms: Millis,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub nodes: Vec<Node>,
    pub links: Vec<Link>,
}

impl Topology {
    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn tier(&self, id: &str) -> Option<Tier> {
        self.node(id).map(|n| n.tier)
    }

    pub fn nodes_in(&self, tier: Tier) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(move |n| n.tier == tier)
    }

    pub fn cloud(&self) -> Option<&Node> {
        self.nodes_in(Tier::Cloud).next()
    }

    /// Node hosting a device service.
    pub fn host_of(&self, service: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.hosts.iter().any(|h| h == service))
    }

    /// Adds a link with the tier-default latency and no jitter.
    pub fn connect(&mut self, a: &str, b: &str) {
        let latency_ms = match (self.tier(a), self.tier(b)) {
            (Some(ta), Some(tb)) => Tier::default_latency(ta, tb),
            _ => 0,
        };
        self.links.push(Link { a: a.into(), b: b.into(), latency_ms, jitter_ms: 0 });
    }
}

/// Checks structural invariants: unique ids, known link endpoints, bounded
/// jitter, a single cloud node, devices attached to fog, fog reaching cloud.
pub fn validate_topology(topo: &Topology) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut ids = BTreeSet::new();
    for (i, n) in topo.nodes.iter().enumerate() {
        if n.id.is_empty() {
            report.push(format!("topology.nodes[{i}].id"), "node id must be non-empty");
        }
        if !ids.insert(n.id.as_str()) {
            report.push(format!("topology.nodes[{i}].id"), format!("duplicate node id '{}'", n.id));
        }
        if n.tier != Tier::Device && !n.hosts.is_empty() {
            report.push(format!("topology.nodes[{i}].hosts"), "only device-tier nodes host device services");
        }
    }
    let clouds = topo.nodes_in(Tier::Cloud).count();
    if clouds != 1 {
        report.push("topology.nodes", format!("exactly one cloud node required, found {clouds}"));
    }
    for (i, l) in topo.links.iter().enumerate() {
        let path = format!("topology.links[{i}]");
        for end in [&l.a, &l.b] {
            if !ids.contains(end.as_str()) {
                report.push(path.clone(), format!("unknown node '{end}'"));
            }
        }
        if l.a == l.b {
            report.push(path.clone(), "self-link");
        }
        if l.jitter_ms > l.latency_ms {
            report.push(path, format!("jitter {} exceeds latency {}", l.jitter_ms, l.latency_ms));
        }
    }
    for (i, n) in topo.nodes.iter().enumerate() {
        if n.tier != Tier::Device {
            continue;
        }
        let to_fog = topo.links.iter().any(|l| {
            let other = if l.a == n.id {
                &l.b
            } else if l.b == n.id {
                &l.a
            } else {
                return false;
            };
            topo.tier(other) == Some(Tier::Fog)
        });
        if !to_fog {
            report.push(format!("topology.nodes[{i}]"), format!("device node '{}' has no fog link", n.id));
        }
    }
    if clouds == 1 && report.is_empty() {
        let routes = RouteTable::new(topo);
        let cloud = topo.cloud().map(|c| c.id.clone()).unwrap_or_default();
        for (i, n) in topo.nodes.iter().enumerate() {
            if n.tier == Tier::Fog && routes.route(&n.id, &cloud).is_none() {
                report.push(format!("topology.nodes[{i}]"), format!("fog node '{}' cannot reach the cloud", n.id));
            }
        }
    }
    report
}

/// Shortest-latency path between two nodes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Route {
    /// Node ids from source to destination inclusive.
    pub nodes: Arc<[Ident]>,
    /// Per-hop latency and jitter bound.
    pub hops: Arc<[(Millis, Millis)]>,
    pub latency: Millis,
}

impl Route {
    pub fn hop_count(&self) -> usize {
        self.hops.len()
    }
}

/// All-pairs routes. Ties between equal-latency paths go to the
/// lexicographically smallest sequence of node ids.
#[derive(Clone, Debug)]
pub struct RouteTable {
    index: BTreeMap<Ident, usize>,
    ids: Vec<Ident>,
    tiers: Vec<Tier>,
    routes: Vec<Vec<Option<Route>>>,
}

impl RouteTable {
    pub fn new(topo: &Topology) -> Self {
        let mut ids: Vec<Ident> = topo.nodes.iter().map(|n| Ident::from(n.id.as_str())).collect();
        ids.sort();
        ids.dedup();
        let index: BTreeMap<Ident, usize> = ids.iter().cloned().enumerate().map(|(i, id)| (id, i)).collect();
        let tiers = ids.iter().map(|id| topo.tier(id).unwrap_or(Tier::Device)).collect();
        let n = ids.len();
        let mut adj: Vec<Vec<(usize, Millis, Millis)>> = vec![Vec::new(); n];
        for l in &topo.links {
            if let (Some(&a), Some(&b)) = (index.get(l.a.as_str()), index.get(l.b.as_str())) {
                if a == b {
                    continue;
                }
                adj[a].push((b, l.latency_ms, l.jitter_ms));
                adj[b].push((a, l.latency_ms, l.jitter_ms));
            }
        }
        let routes = (0..n).map(|src| shortest_from(src, &adj, &ids)).collect();
        RouteTable { index, ids, tiers, routes }
    }

    pub fn route(&self, from: &str, to: &str) -> Option<&Route> {
        let a = *self.index.get(from)?;
        let b = *self.index.get(to)?;
        self.routes[a][b].as_ref()
    }

    pub fn latency(&self, from: &str, to: &str) -> Option<Millis> {
        self.route(from, to).map(|r| r.latency)
    }

    pub fn tier(&self, id: &str) -> Option<Tier> {
        self.index.get(id).map(|&i| self.tiers[i])
    }

    pub fn node_ids(&self) -> &[Ident] {
        &self.ids
    }
}

/// Distance, node path and per-hop (latency, jitter) of a partial route.
type Partial = (Millis, Vec<usize>, Vec<(Millis, Millis)>);

fn shortest_from(src: usize, adj: &[Vec<(usize, Millis, Millis)>], ids: &[Ident]) -> Vec<Option<Route>> {
    let n = adj.len();
    let mut best: Vec<Option<Partial>> = vec![None; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    heap.push(Reverse((0, vec![src], Vec::new())));
    while let Some(Reverse((dist, path, hops))) = heap.pop() {
        let at = *path.last().expect("non-empty path");
        if done[at] {
            continue;
        }
        done[at] = true;
        for &(next, lat, jit) in &adj[at] {
            if done[next] {
                continue;
            }
            let mut p = path.clone();
            p.push(next);
            let mut h = hops.clone();
            h.push((lat, jit));
            heap.push(Reverse((dist + lat, p, h)));
        }
        best[at] = Some((dist, path, hops));
    }
    best.into_iter()
        .map(|b| {
            b.map(|(latency, path, hops)| Route {
                nodes: path.iter().map(|&i| ids[i].clone()).collect(),
                hops: hops.into(),
                latency,
            })
        })
        .collect()
}
