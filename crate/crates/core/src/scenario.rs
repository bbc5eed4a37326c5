//! Scenario files: loading, validation, digests, variant overrides and the
//! bundled smart-building scenarios.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::coordination::{validate_control, AggregationSpec, ControlMode};
use crate::mape::{validate_policies, Condition, Policy};
use crate::model::{validate_domain, Domain, ServiceKind, ValidationReport};
use crate::placement::{nearest_fog, place, validate_loops, validate_placement, LoopSpec, Offering, Placement, Role};
use crate::simnet::{validate_topology, RouteTable, Tier, Topology};
use crate::smartbuilding::{
    build_smart_building, set_mode, BuildError, BuildMode, BuildOptions, Building, DeviceKind, EnvEntry, Weather,
    MASTER_LOOP,
};
use crate::value::{Ident, Millis, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MasterConfig {
    #[serde(rename = "loop")]
    pub loop_id: Ident,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<Ident>,
    #[serde(default)]
    pub aggregations: Vec<AggregationSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlConfig {
    Centralized {
        master: MasterConfig,
    },
    Decentralized {
        group: Vec<Ident>,
        #[serde(default = "default_coordinate")]
        coordinate: Vec<Role>,
    },
}

fn default_coordinate() -> Vec<Role> {
    vec![Role::Execute]
}

impl ControlConfig {
    pub fn to_mode(&self) -> ControlMode {
        match self {
            ControlConfig::Centralized { master } => {
                ControlMode::Centralized { master: master.loop_id.clone(), aggregations: master.aggregations.clone() }
            }
            ControlConfig::Decentralized { group, coordinate } => {
                ControlMode::Decentralized { group: group.clone(), coordinate: coordinate.clone() }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub domain: Domain,
    pub topology: Topology,
    pub loops: Vec<LoopSpec>,
    pub policies: Vec<Policy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub building: Option<Building>,
    #[serde(default)]
    pub environment: Vec<EnvEntry>,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse {path}: {source}")]
    Parse { path: String, source: serde_json::Error },
    #[error("scenario is invalid:\n{0}")]
    Invalid(ValidationReport),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error("bad variant '{0}': expected '+'-joined tokens from mapeaas, apaas_split, standalone, centralized, decentralized")]
    BadVariant(String),
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text).map_err(|source| ScenarioError::Parse { path: path.display().to_string(), source })
    }

    pub fn to_pretty_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scenario serialises");
        s.push('\n');
        s
    }

    /// SHA-256 of the compact JSON with object keys sorted.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_value(self).expect("scenario serialises").to_string();
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn control_mode(&self) -> Option<ControlMode> {
        self.control.as_ref().map(ControlConfig::to_mode)
    }
}

/// A validated scenario with every loop component placed.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub scenario: Scenario,
    pub placement: Placement,
}

/// Fills in the master's default node: the fog node with least summed
/// latency from the slaves' fog nodes.
fn with_master_node(scenario: &Scenario) -> Scenario {
    let mut s = scenario.clone();
    let Some(ControlConfig::Centralized { master }) = &scenario.control else { return s };
    let Some(idx) = s.loops.iter().position(|l| l.id == master.loop_id) else { return s };
    if let Some(node) = &master.node {
        s.loops[idx].node = Some(node.clone());
        return s;
    }
    if s.loops[idx].node.is_some() {
        return s;
    }
    let slaves: Vec<LoopSpec> = s.loops.iter().filter(|l| l.id != master.loop_id).cloned().collect();
    let Ok(p) = place(&slaves, &s.topology) else { return s };
    let sources: Vec<&str> = slaves.iter().filter_map(|l| p.node_of(&l.id, Role::Monitor)).map(|n| &**n).collect();
    let routes = RouteTable::new(&s.topology);
    s.loops[idx].node = nearest_fog(&routes, &sources);
    s
}

/// Runs every validator and returns the placed scenario if all are clean.
pub fn resolve(scenario: &Scenario) -> Result<Resolved, ScenarioError> {
    let (report, resolved) = check(scenario);
    match resolved {
        Some(r) if report.is_empty() => Ok(r),
        _ => Err(ScenarioError::Invalid(report)),
    }
}

pub fn validate(scenario: &Scenario) -> ValidationReport {
    check(scenario).0
}

fn check(scenario: &Scenario) -> (ValidationReport, Option<Resolved>) {
    let mut report = ValidationReport::default();
    let domain_report = validate_domain(&scenario.domain);
    let topo_report = validate_topology(&scenario.topology);
    let structural = domain_report.is_empty() && topo_report.is_empty();
    report.extend(domain_report);
    report.extend(topo_report);
    report.extend(validate_policies(&scenario.policies, &scenario.domain));
    report.extend(validate_loops(&scenario.loops, &scenario.domain, &scenario.policies));
    if let Some(control) = &scenario.control {
        report.extend(validate_control(&control.to_mode(), &scenario.loops, &scenario.domain));
    }
    hosting(scenario, &mut report);
    building(scenario, &mut report);
    environment(scenario, &mut report);

    if !structural {
        return (report, None);
    }
    let placed = with_master_node(scenario);
    match place(&placed.loops, &placed.topology) {
        Ok(p) => {
            report.extend(validate_placement(&p, &placed.loops, &placed.topology));
            (report, Some(Resolved { scenario: placed, placement: p }))
        }
        Err(e) => {
            report.push("loops", e.to_string());
            (report, None)
        }
    }
}

/// Physical devices live on exactly one device node; virtual ones nowhere.
fn hosting(s: &Scenario, report: &mut ValidationReport) {
    let mut hosts: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for n in &s.topology.nodes {
        for h in &n.hosts {
            hosts.entry(h.as_str()).or_default().push(n.id.as_str());
        }
    }
    for svc in s.domain.services() {
        let on = hosts.remove(svc.name.as_str()).unwrap_or_default();
        match (svc.kind, on.len()) {
            (ServiceKind::PhysicalDevice, 0) => {
                report.push(format!("services.{}", svc.name), "physical device is not hosted on any node")
            }
            (ServiceKind::PhysicalDevice, 1) | (ServiceKind::Virtual, 0) => {}
            (ServiceKind::PhysicalDevice, _) => {
                report.push(format!("services.{}", svc.name), format!("hosted on several nodes: {}", on.join(", ")))
            }
            (ServiceKind::Virtual, _) => {
                report.push(format!("services.{}", svc.name), "virtual service cannot be hosted on a node")
            }
        }
    }
    for (svc, nodes) in hosts {
        report.push(format!("topology.nodes.{}", nodes[0]), format!("hosts unknown service '{svc}'"));
    }
}

fn building(s: &Scenario, report: &mut ValidationReport) {
    let Some(b) = &s.building else {
        report.push("building", "a building section is required to simulate devices");
        return;
    };
    if b.offices.is_empty() {
        report.push("building.offices", "at least one office is required");
    }
    let mut seen = BTreeSet::new();
    for (i, o) in b.offices.iter().enumerate() {
        if !seen.insert(&o.id) {
            report.push(format!("building.offices[{i}].id"), format!("duplicate office '{}'", o.id));
        }
        if !o.initial_temp_c.is_finite() {
            report.push(format!("building.offices[{i}].initial_temp_c"), "must be finite");
        }
        for k in DeviceKind::ALL {
            let want = crate::smartbuilding::device_service(&o.id, k, 1);
            match s.domain.service(&want.name) {
                None => {
                    report.push(format!("building.offices[{i}]"), format!("missing device service '{}'", want.name))
                }
                Some(have) => {
                    for p in &want.parameters {
                        match have.parameter(&p.name) {
                            Some(hp) if hp.value_type == p.value_type => {}
                            _ => report.push(
                                format!("building.offices[{i}]"),
                                format!("'{}' needs parameter {} of type {}", want.name, p.name, p.value_type),
                            ),
                        }
                    }
                }
            }
        }
    }
    let p = &b.params;
    if !p.setpoint_c.is_finite() {
        report.push("building.params.setpoint_c", "must be finite");
    }
    let rates = [p.heater_rate_c_per_min, p.leak_open_per_min, p.leak_closed_per_min];
    if rates.iter().any(|x| !x.is_finite() || *x < 0.0) {
        report.push("building.params", "rates must be finite and non-negative");
    }
    if p.clock_duration_ms == 0 {
        report.push("building.params.clock_duration_ms", "must be positive");
    }
}

fn environment(s: &Scenario, report: &mut ValidationReport) {
    let mut prev: Option<Millis> = None;
    for (i, e) in s.environment.iter().enumerate() {
        let path = format!("environment[{i}]");
        if let Some(p) = prev {
            if e.t <= p {
                report.push(format!("{path}.t"), format!("times must strictly increase ({} after {p})", e.t));
            }
        }
        prev = Some(e.t);
        if e.outside_temp.is_some_and(|t| !t.is_finite()) {
            report.push(format!("{path}.outside_temp"), "must be finite");
        }
        for (j, a) in e.actions.iter().enumerate() {
            let apath = format!("{path}.actions[{j}]");
            match s.domain.command(&a.service, &a.command) {
                None => report.push(apath, format!("unknown command '{}.{}'", a.service, a.command)),
                Some(c) => match (&c.argument_type, &a.arg) {
                    (None, None) => {}
                    (Some(t), Some(v)) if t.accepts_literal(v) => {}
                    (Some(t), _) => report.push(apath, format!("command '{}' needs a {t} argument", a.command)),
                    (None, Some(_)) => report.push(apath, format!("command '{}' takes no argument", a.command)),
                },
            }
        }
    }
}

/// One column of a comparison: optional mode and offering overrides.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Variant {
    pub mode: Option<BuildMode>,
    pub offering: Option<Offering>,
}

impl FromStr for Variant {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut v = Variant::default();
        for token in s.split('+').map(str::trim) {
            match token {
                "mapeaas" if v.offering.is_none() => v.offering = Some(Offering::Mapeaas),
                "apaas_split" if v.offering.is_none() => v.offering = Some(Offering::ApaasSplit),
                "standalone" if v.mode.is_none() => v.mode = Some(BuildMode::Standalone),
                "centralized" if v.mode.is_none() => v.mode = Some(BuildMode::Centralized),
                "decentralized" if v.mode.is_none() => v.mode = Some(BuildMode::Decentralized),
                _ => return Err(ScenarioError::BadVariant(s.to_string())),
            }
        }
        Ok(v)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if let Some(m) = self.mode {
            parts.push(match m {
                BuildMode::Standalone => "standalone",
                BuildMode::Centralized => "centralized",
                BuildMode::Decentralized => "decentralized",
            });
        }
        if let Some(o) = self.offering {
            parts.push(o.as_str());
        }
        if parts.is_empty() {
            f.write_str("as-is")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

/// Threshold of the master's energy rule, if the scenario has one.
fn current_budget(s: &Scenario) -> Option<f64> {
    let master = s.loops.iter().find(|l| &*l.id == MASTER_LOOP)?;
    let policy = s.policies.iter().find(|p| master.policies.contains(&p.name))?;
    policy.when.iter().find_map(|c| match c {
        Condition::Compare(c) => c.value.as_f64(),
        Condition::Elapsed { .. } => None,
    })
}

/// Applies a variant: the mode first, then the offering to every loop.
pub fn apply_variant(s: &Scenario, v: &Variant) -> Result<Scenario, ScenarioError> {
    let mut out = s.clone();
    if let Some(mode) = v.mode {
        let budget = current_budget(s).unwrap_or(BuildOptions::default().budget_kwh);
        set_mode(&mut out, mode, budget)?;
    }
    if let Some(offering) = v.offering {
        for l in &mut out.loops {
            l.offering = offering;
            l.components.clear();
        }
    }
    Ok(out)
}

pub const MINUTE: Millis = 60_000;

/// Bundled 1-office scenario: a sunny spell, occupant lamp use and the door
/// locked in the evening.
pub fn bundled_1office() -> Scenario {
    let mut s = build_smart_building(&BuildOptions::default()).expect("one office");
    s.name = "smart-building-1office".into();
    let lamp_on = |e: EnvEntry| e.action("office1.lamp", "set_power", Some(Value::Bool(true)));
    s.environment = vec![
        lamp_on(EnvEntry::at(0).weather(Weather::NotSunny).outside(15.0)),
        EnvEntry::at(20 * MINUTE).weather(Weather::Sunny),
        lamp_on(EnvEntry::at(40 * MINUTE)),
        EnvEntry::at(50 * MINUTE).weather(Weather::NotSunny),
        lamp_on(EnvEntry::at(55 * MINUTE)),
        EnvEntry::at(70 * MINUTE).action("office1.door", "lock", None),
    ];
    s
}

/// Bundled 3-office scenario in the given mode. It warms up outside late in
/// the run so every office ends in the same discrete state.
pub fn bundled_3office(mode: BuildMode) -> Scenario {
    let opts = BuildOptions { offices: 3, mode, budget_kwh: 8.0, ..BuildOptions::default() };
    let mut s = build_smart_building(&opts).expect("three offices");
    s.name = match mode {
        BuildMode::Centralized => "smart-building-3office-centralized",
        BuildMode::Decentralized => "smart-building-3office-decentralized",
        BuildMode::Standalone => "smart-building-3office",
    }
    .into();
    if let Some(b) = &mut s.building {
        for (i, o) in b.offices.iter_mut().enumerate() {
            o.initial_temp_c = 17.0 + i as f64;
        }
    }
    let mut start = EnvEntry::at(0).weather(Weather::NotSunny).outside(15.0);
    for o in ["office1", "office2", "office3"] {
        start = start.action(&format!("{o}.lamp"), "set_power", Some(Value::Bool(true)));
    }
    s.environment = vec![
        start,
        EnvEntry::at(20 * MINUTE).weather(Weather::Sunny),
        EnvEntry::at(40 * MINUTE).action("office2.lamp", "set_power", Some(Value::Bool(true))),
        EnvEntry::at(50 * MINUTE).weather(Weather::NotSunny),
        EnvEntry::at(55 * MINUTE).action("office1.lamp", "set_power", Some(Value::Bool(true))).action(
            "office3.lamp",
            "set_power",
            Some(Value::Bool(true)),
        ),
        EnvEntry::at(60 * MINUTE).action("office1.door", "lock", None),
        EnvEntry::at(65 * MINUTE).action("office2.door", "lock", None),
        EnvEntry::at(70 * MINUTE).action("office3.door", "lock", None),
        EnvEntry::at(110 * MINUTE).outside(30.0),
    ];
    s
}

/// File name and content of every bundled scenario.
pub fn bundled() -> Vec<(&'static str, Scenario)> {
    vec![
        ("smart_building_1office.json", bundled_1office()),
        ("smart_building_3office_centralized.json", bundled_3office(BuildMode::Centralized)),
        ("smart_building_3office_decentralized.json", bundled_3office(BuildMode::Decentralized)),
    ]
}

/// Tier of every node, for trace headers.
pub fn node_tiers(topology: &Topology) -> BTreeMap<String, Tier> {
    topology.nodes.iter().map(|n| (n.id.clone(), n.tier)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_scenarios_validate() {
        for (name, s) in bundled() {
            let report = validate(&s);
            assert!(report.is_empty(), "{name}:\n{report}");
        }
    }

    #[test]
    fn bundled_files_match_generator() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
        for (name, s) in bundled() {
            let path = dir.join(name);
            if std::env::var_os("FOGLOOP_REGENERATE").is_some() {
                std::fs::write(&path, s.to_pretty_json()).unwrap();
            }
            let on_disk = Scenario::load(&path).unwrap();
            assert_eq!(on_disk, s, "{name} is out of date; rerun with FOGLOOP_REGENERATE=1");
        }
    }

    #[test]
    fn json_round_trip_keeps_digest() {
        let s = bundled_1office();
        let back = Scenario::from_json(&s.to_pretty_json()).unwrap();
        assert_eq!(back.digest(), s.digest());
        let mut other = s.clone();
        other.environment.pop();
        assert_ne!(other.digest(), s.digest());
    }

    #[test]
    fn centralized_master_lands_on_a_fog_node() {
        let r = resolve(&bundled_3office(BuildMode::Centralized)).unwrap();
        assert_eq!(r.placement.node_of(MASTER_LOOP, Role::Analyze).map(|n| &**n), Some("fog1"));
        assert_eq!(r.placement.node_of("office3", Role::Execute).map(|n| &**n), Some("fog3"));
    }

    #[test]
    fn execute_on_cloud_is_reported() {
        let mut s = apply_variant(&bundled_1office(), &"apaas_split".parse().unwrap()).unwrap();
        assert!(validate(&s).is_empty());
        s.loops[0].components.insert(Role::Execute, "cloud".into());
        let report = validate(&s);
        assert_eq!(report.len(), 1, "{report}");
        assert!(report.to_string().contains("execute must remain at fog"));
    }

    #[test]
    fn variants_parse_and_apply() {
        let v: Variant = "centralized+apaas_split".parse().unwrap();
        assert_eq!(v, Variant { mode: Some(BuildMode::Centralized), offering: Some(Offering::ApaasSplit) });
        assert!("mapeaas+apaas_split".parse::<Variant>().is_err());
        assert!("fast".parse::<Variant>().is_err());

        let c = bundled_3office(BuildMode::Centralized);
        let d = apply_variant(&c, &"decentralized".parse().unwrap()).unwrap();
        assert_eq!(d.loops.len(), 3);
        let back = apply_variant(&d, &"centralized".parse().unwrap()).unwrap();
        // The budget falls back to the default once the master is gone.
        assert_eq!(back.loops.len(), 4);
        let all_split = apply_variant(&c, &"apaas_split".parse().unwrap()).unwrap();
        assert!(all_split.loops.iter().all(|l| l.offering == Offering::ApaasSplit));
        assert_eq!(current_budget(&all_split), Some(8.0));
    }

    #[test]
    fn environment_must_increase() {
        let mut s = bundled_1office();
        s.environment[1].t = s.environment[0].t;
        s.environment[2].actions.push(crate::smartbuilding::EnvAction {
            service: "office1.heater".into(),
            command: "set_power".into(),
            arg: Some(Value::symbol("warm")),
        });
        let text = validate(&s).to_string();
        assert!(text.contains("environment[1].t: times must strictly increase"), "{text}");
        assert!(text.contains("needs a boolean argument"), "{text}");
    }
}
