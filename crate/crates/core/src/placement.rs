//! Assigning loop components to nodes.
//!
//! A MAPEaaS loop runs entirely on the fog node closest to the devices it
//! manages. An APaaS-split loop keeps monitor and execute on that fog node
//! and moves analyze, plan and knowledge to the cloud.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mape::Policy;
use crate::model::{Domain, ValidationReport};
use crate::simnet::{RouteTable, Tier, Topology};
use crate::value::{Ident, Millis};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Monitor,
    Analyze,
    Plan,
    Execute,
    Knowledge,
}

impl Role {
    pub const ALL: [Role; 5] = [Role::Monitor, Role::Analyze, Role::Plan, Role::Execute, Role::Knowledge];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Monitor => "monitor",
            Role::Analyze => "analyze",
            Role::Plan => "plan",
            Role::Execute => "execute",
            Role::Knowledge => "knowledge",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Offering {
    #[serde(rename = "mapeaas")]
    Mapeaas,
    #[serde(rename = "apaas_split")]
    ApaasSplit,
}

impl Offering {
    pub fn as_str(self) -> &'static str {
        match self {
            Offering::Mapeaas => "mapeaas",
            Offering::ApaasSplit => "apaas_split",
        }
    }

    /// Tier a component must sit on under this offering.
    pub fn tier_of(self, role: Role) -> Tier {
        match (self, role) {
            (Offering::ApaasSplit, Role::Analyze | Role::Plan | Role::Knowledge) => Tier::Cloud,
            _ => Tier::Fog,
        }
    }
}

impl fmt::Display for Offering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopSpec {
    pub id: Ident,
    pub scope: Vec<Ident>,
    pub offering: Offering,
    #[serde(default)]
    pub policies: Vec<Ident>,
    /// Fog node override for the loop's fog-side components.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<Ident>,
    /// Explicit per-component nodes; these win over everything else.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub components: BTreeMap<Role, Ident>,
}

impl LoopSpec {
    pub fn new(id: &str, scope: &[&str], offering: Offering, policies: &[&str]) -> Self {
        LoopSpec {
            id: id.into(),
            scope: scope.iter().map(|&s| s.into()).collect(),
            offering,
            policies: policies.iter().map(|&p| p.into()).collect(),
            node: None,
            components: BTreeMap::new(),
        }
    }
}

/// Node of every (loop, component) pair.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Placement {
    pub assignments: BTreeMap<(Ident, Role), Ident>,
}

impl Placement {
    pub fn node_of(&self, loop_id: &str, role: Role) -> Option<&Ident> {
        self.assignments.get(&(Ident::from(loop_id), role))
    }

    pub fn assign(&mut self, loop_id: &str, role: Role, node: &str) {
        self.assignments.insert((loop_id.into(), role), node.into());
    }

    pub fn remove(&mut self, loop_id: &str, role: Role) -> Option<Ident> {
        self.assignments.remove(&(Ident::from(loop_id), role))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlacementError {
    #[error("loop '{0}': no fog node is reachable from every scope device")]
    NoFogNode(String),
    #[error("topology has no cloud node")]
    NoCloud,
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("loop '{loop_id}' references unknown policy '{policy}'")]
    UnknownPolicy { loop_id: String, policy: String },
}

/// Fog node with the smallest summed latency from `sources`, among those
/// every source can reach. Ties go to the smallest id.
pub fn nearest_fog(routes: &RouteTable, sources: &[&str]) -> Option<Ident> {
    let mut best: Option<(Millis, &Ident)> = None;
    for id in routes.node_ids() {
        if routes.tier(id) != Some(Tier::Fog) {
            continue;
        }
        let total: Option<Millis> = sources.iter().map(|s| routes.latency(s, id)).sum();
        if let Some(total) = total {
            // node_ids is sorted, so strict < keeps the smallest id on ties.
            if best.is_none_or(|(b, _)| total < b) {
                best = Some((total, id));
            }
        }
    }
    best.map(|(_, id)| id.clone())
}

/// Device nodes hosting a loop's scope services. Virtual services have none.
pub fn scope_nodes<'a>(spec: &LoopSpec, topology: &'a Topology) -> Vec<&'a str> {
    let mut nodes: Vec<&str> = spec.scope.iter().filter_map(|s| topology.host_of(s)).map(|n| n.id.as_str()).collect();
    nodes.sort_unstable();
    nodes.dedup();
    nodes
}

/// Places every loop. Explicit `node` and `components` overrides are taken
/// as given; `validate_placement` is what judges them.
pub fn place(loops: &[LoopSpec], topology: &Topology) -> Result<Placement, PlacementError> {
    let routes = RouteTable::new(topology);
    let cloud = topology.cloud().ok_or(PlacementError::NoCloud)?.id.clone();
    let mut placement = Placement::default();
    for spec in loops {
        let fog = match &spec.node {
            Some(n) => n.clone(),
            None => nearest_fog(&routes, &scope_nodes(spec, topology))
                .ok_or_else(|| PlacementError::NoFogNode(spec.id.to_string()))?,
        };
        for role in Role::ALL {
            let node = match spec.components.get(&role) {
                Some(n) => n.clone(),
                None if spec.offering.tier_of(role) == Tier::Cloud => Ident::from(cloud.as_str()),
                None => fog.clone(),
            };
            placement.assignments.insert((spec.id.clone(), role), node);
        }
    }
    Ok(placement)
}

/// Checks a placement against the offering rules. Analyze must also share a
/// node with knowledge, since it reads the knowledge base directly.
pub fn validate_placement(p: &Placement, loops: &[LoopSpec], topology: &Topology) -> ValidationReport {
    let mut report = ValidationReport::default();
    for (i, spec) in loops.iter().enumerate() {
        let path = format!("loops[{i}]");
        let missing: Vec<&str> =
            Role::ALL.iter().filter(|&&r| p.node_of(&spec.id, r).is_none()).map(|r| r.as_str()).collect();
        if !missing.is_empty() {
            report.push(path.clone(), format!("placement not total: missing {}", missing.join(", ")));
        }
        for role in Role::ALL {
            let Some(node) = p.node_of(&spec.id, role) else { continue };
            let rpath = format!("{path}.{role}");
            let Some(tier) = topology.tier(node) else {
                report.push(rpath, format!("unknown node '{node}'"));
                continue;
            };
            let want = spec.offering.tier_of(role);
            if tier == want {
                continue;
            }
            let msg = match (spec.offering, role) {
                (Offering::ApaasSplit, Role::Monitor | Role::Execute) => format!("{role} must remain at fog"),
                (Offering::ApaasSplit, _) => format!("{role} must be on the cloud"),
                (Offering::Mapeaas, _) => format!("{role} must be on a fog node"),
            };
            report.push(rpath, format!("{msg} (placed on {tier} node '{node}')"));
        }
        if let (Some(a), Some(k)) = (p.node_of(&spec.id, Role::Analyze), p.node_of(&spec.id, Role::Knowledge)) {
            if a != k {
                report.push(format!("{path}.analyze"), "analyze must share a node with knowledge");
            }
        }
    }
    let known: BTreeSet<&str> = loops.iter().map(|l| &*l.id).collect();
    for (loop_id, role) in p.assignments.keys() {
        if !known.contains(&**loop_id) {
            report.push("placement", format!("{role} of unknown loop '{loop_id}'"));
        }
    }
    report
}

/// Checks loop specs against the domain and the declared policies.
pub fn validate_loops(loops: &[LoopSpec], domain: &Domain, policies: &[Policy]) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut ids = BTreeSet::new();
    let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
    for (i, spec) in loops.iter().enumerate() {
        let path = format!("loops[{i}]");
        if spec.id.is_empty() {
            report.push(format!("{path}.id"), "loop id must be non-empty");
        }
        if !ids.insert(&*spec.id) {
            report.push(format!("{path}.id"), format!("duplicate loop id '{}'", spec.id));
        }
        if spec.scope.is_empty() {
            report.push(format!("{path}.scope"), "scope must be non-empty");
        }
        for (j, service) in spec.scope.iter().enumerate() {
            if domain.service(service).is_none() {
                report.push(format!("{path}.scope[{j}]"), format!("unknown service '{service}'"));
            }
            if let Some(prev) = owner.insert(service, &spec.id) {
                if prev != &*spec.id {
                    report.push(
                        format!("{path}.scope[{j}]"),
                        format!("service '{service}' already managed by loop '{prev}'"),
                    );
                }
            }
        }
        for (j, name) in spec.policies.iter().enumerate() {
            if !policies.iter().any(|p| p.name == *name) {
                report.push(format!("{path}.policies[{j}]"), format!("unknown policy '{name}'"));
            }
        }
    }
    report
}

/// Services a policy reads or acts on.
pub fn policy_services(policy: &Policy) -> BTreeSet<Ident> {
    let mut out: BTreeSet<Ident> = policy.when.iter().map(|c| c.stream().0.clone()).collect();
    out.extend(policy.then.iter().map(|a| a.service.clone()));
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub children: Vec<LoopSpec>,
    /// Policies whose services span several cells. They sit on the
    /// coordinator child (the first one).
    pub cross_scope: Vec<Ident>,
}

/// Splits a loop into one child per partition cell. A single cell gives back
/// the parent unchanged; otherwise children are named `<parent>.<n>`.
pub fn split_loop(spec: &LoopSpec, partition: &[Vec<Ident>], policies: &[Policy]) -> Result<Split, PlacementError> {
    let scope: BTreeSet<&Ident> = spec.scope.iter().collect();
    let mut seen = BTreeSet::new();
    for (i, cell) in partition.iter().enumerate() {
        if cell.is_empty() {
            return Err(PlacementError::InvalidPartition(format!("cell {i} is empty")));
        }
        for s in cell {
            if !scope.contains(s) {
                return Err(PlacementError::InvalidPartition(format!("'{s}' is outside loop '{}'", spec.id)));
            }
            if !seen.insert(s) {
                return Err(PlacementError::InvalidPartition(format!("'{s}' appears in more than one cell")));
            }
        }
    }
    if let Some(gap) = scope.iter().find(|s| !seen.contains(**s)) {
        return Err(PlacementError::InvalidPartition(format!("'{gap}' is not covered")));
    }
    if partition.len() == 1 {
        return Ok(Split { children: vec![spec.clone()], cross_scope: Vec::new() });
    }

    let mut children: Vec<LoopSpec> = partition
        .iter()
        .enumerate()
        .map(|(i, cell)| LoopSpec {
            id: format!("{}.{}", spec.id, i + 1).into(),
            scope: cell.clone(),
            offering: spec.offering,
            policies: Vec::new(),
            node: None,
            components: BTreeMap::new(),
        })
        .collect();
    let mut cross_scope = Vec::new();
    for name in &spec.policies {
        let policy = policies
            .iter()
            .find(|p| p.name == *name)
            .ok_or_else(|| PlacementError::UnknownPolicy { loop_id: spec.id.to_string(), policy: name.to_string() })?;
        let services = policy_services(policy);
        let home = partition.iter().position(|cell| services.iter().all(|s| cell.contains(s)));
        match home {
            Some(i) => children[i].policies.push(name.clone()),
            None => {
                children[0].policies.push(name.clone());
                cross_scope.push(name.clone());
            }
        }
    }
    Ok(Split { children, cross_scope })
}
