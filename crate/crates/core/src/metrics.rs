//! Run measurements and their CSV / text renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::simnet::Tier;
use crate::smartbuilding::watt_ms_to_kwh;
use crate::value::{Ident, Millis};

/// Time from the freshest observation behind a decision to its first
/// actuation taking effect.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DecisionSample {
    pub plan: Ident,
    pub policy: Ident,
    pub latency_ms: Millis,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Metrics {
    pub decisions: Vec<DecisionSample>,
    /// Hop crossings between tiers, by (from, to).
    pub hops: BTreeMap<(Tier, Tier), u64>,
    pub messages_by_kind: BTreeMap<&'static str, u64>,
    pub messages: u64,
    pub office_watt_ms: BTreeMap<Ident, u64>,
    pub symptoms: u64,
    pub plans: u64,
    pub dispatches: u64,
    pub actuations: u64,
    pub state_changes: u64,
    pub delegations: u64,
    pub aggregations: u64,
    pub rounds_opened: u64,
    pub rounds_completed: u64,
    pub rounds_aborted: u64,
    pub suppressed: u64,
    pub stale_observations: u64,
}

pub fn boundary_label(from: Tier, to: Tier) -> String {
    format!("{from}->{to}")
}

/// Every boundary reported in the CSV, in output order.
pub const BOUNDARIES: [(Tier, Tier); 6] = [
    (Tier::Device, Tier::Fog),
    (Tier::Fog, Tier::Device),
    (Tier::Fog, Tier::Fog),
    (Tier::Fog, Tier::Cloud),
    (Tier::Cloud, Tier::Fog),
    (Tier::Device, Tier::Device),
];

impl Metrics {
    pub fn hops(&self, from: Tier, to: Tier) -> u64 {
        self.hops.get(&(from, to)).copied().unwrap_or(0)
    }

    pub fn fog_to_cloud(&self) -> u64 {
        self.hops(Tier::Fog, Tier::Cloud)
    }

    pub fn total_watt_ms(&self) -> u64 {
        self.office_watt_ms.values().sum()
    }

    pub fn total_kwh(&self) -> f64 {
        watt_ms_to_kwh(self.total_watt_ms())
    }

    /// Latency samples of one policy, or all of them.
    pub fn latencies(&self, policy: Option<&str>) -> Vec<Millis> {
        self.decisions.iter().filter(|d| policy.is_none_or(|p| &*d.policy == p)).map(|d| d.latency_ms).collect()
    }

    pub fn mean_latency(&self, policy: Option<&str>) -> Option<f64> {
        let l = self.latencies(policy);
        (!l.is_empty()).then(|| l.iter().sum::<Millis>() as f64 / l.len() as f64)
    }

    pub fn max_latency(&self, policy: Option<&str>) -> Option<Millis> {
        self.latencies(policy).into_iter().max()
    }

    /// Long-format CSV with header `metric,scope,value`. Row order is fixed.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,scope,value\n");
        let mut row = |m: &str, s: &str, v: String| {
            let _ = writeln!(out, "{m},{s},{v}");
        };
        let mut policies: Vec<&str> = self.decisions.iter().map(|d| &*d.policy).collect();
        policies.sort_unstable();
        policies.dedup();
        for scope in std::iter::once(None).chain(policies.into_iter().map(Some)) {
            let name = scope.unwrap_or("all");
            row("decision_count", name, self.latencies(scope).len().to_string());
            if let Some(m) = self.mean_latency(scope) {
                row("decision_latency_ms_mean", name, m.to_string());
            }
            if let Some(m) = self.max_latency(scope) {
                row("decision_latency_ms_max", name, m.to_string());
            }
        }
        row("messages", "all", self.messages.to_string());
        for (a, b) in BOUNDARIES {
            row("hops", &boundary_label(a, b), self.hops(a, b).to_string());
        }
        for kind in crate::coordination::InteractionKind::ALL {
            let n = self.messages_by_kind.get(kind.as_str()).copied().unwrap_or(0);
            row("messages_by_kind", kind.as_str(), n.to_string());
        }
        for (office, wms) in &self.office_watt_ms {
            row("energy_watt_ms", office, wms.to_string());
            row("energy_kwh", office, watt_ms_to_kwh(*wms).to_string());
        }
        row("energy_watt_ms", "total", self.total_watt_ms().to_string());
        row("energy_kwh", "total", self.total_kwh().to_string());
        for (m, v) in [
            ("symptoms", self.symptoms),
            ("plans", self.plans),
            ("dispatches", self.dispatches),
            ("actuations", self.actuations),
            ("state_changes", self.state_changes),
            ("delegations", self.delegations),
            ("aggregations", self.aggregations),
            ("rounds_opened", self.rounds_opened),
            ("rounds_completed", self.rounds_completed),
            ("rounds_aborted", self.rounds_aborted),
            ("suppressed", self.suppressed),
            ("stale_observations", self.stale_observations),
        ] {
            row(m, "all", v.to_string());
        }
        out
    }

    /// Human-readable summary.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let fmt_opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.3}"));
        let _ = writeln!(s, "decisions: {}", self.decisions.len());
        let _ = writeln!(s, "decision latency mean ms: {}", fmt_opt(self.mean_latency(None)));
        let _ = writeln!(s, "decision latency max ms: {}", fmt_opt(self.max_latency(None).map(|m| m as f64)));
        let _ = writeln!(s, "messages: {}", self.messages);
        let _ = writeln!(s, "fog->cloud messages: {}", self.fog_to_cloud());
        let _ = writeln!(s, "cloud->fog messages: {}", self.hops(Tier::Cloud, Tier::Fog));
        let _ = writeln!(s, "symptoms/plans/dispatches: {}/{}/{}", self.symptoms, self.plans, self.dispatches);
        for (office, wms) in &self.office_watt_ms {
            let _ = writeln!(s, "energy {office}: {:.6} kWh", watt_ms_to_kwh(*wms));
        }
        let _ = writeln!(s, "energy total: {:.6} kWh", self.total_kwh());
        s
    }
}
