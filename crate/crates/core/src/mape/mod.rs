//! MAPE-K components: monitor, analyzer, planner and executor around a
//! [`KnowledgeBase`], with [`Policy`] rules as the analysis/planning
//! semantics.

mod knowledge;
mod policy;

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

pub use knowledge::{KnowledgeBase, LatestEntry, Observation};
pub use policy::{validate_policies, Comparator, Comparison, Condition, ElapsedSince, PlannedAction, Policy};

use crate::value::{Ident, Millis, Value};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapeError {
    #[error("unknown touchpoint '{service}.{parameter}'")]
    UnknownTouchpoint { service: String, parameter: String },
    #[error("stale observation for '{service}.{parameter}': t={got} is before latest t={latest}")]
    StaleObservation { service: String, parameter: String, latest: Millis, got: Millis },
    #[error("policy '{policy}': cannot compare {left} with {right}")]
    TypeMismatch { policy: String, left: String, right: String },
    #[error("unknown policy '{0}'")]
    UnknownPolicy(String),
    #[error("plan {plan}: target '{service}' unreachable from executor")]
    UnreachableTarget { plan: String, service: String },
    #[error("plan {0} already dispatched")]
    DoubleDispatch(String),
}

/// Read access to a device's current state.
pub trait Sensor {
    fn read(&self, parameter: &str) -> Option<Value>;
}

/// The monitor's registry of sensed touchpoints.
#[derive(Clone, Debug, Default)]
pub struct Monitor {
    touchpoints: BTreeSet<(Ident, Ident)>,
}

impl Monitor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, service: &str, parameter: &str) {
        self.touchpoints.insert((service.into(), parameter.into()));
    }

    pub fn is_registered(&self, service: &str, parameter: &str) -> bool {
        self.touchpoints.iter().any(|(s, p)| &**s == service && &**p == parameter)
    }

    /// Reads one touchpoint through its sensor, stamping it with `now`.
    pub fn sample(
        &self,
        sensor: &dyn Sensor,
        service: &str,
        parameter: &str,
        now: Millis,
    ) -> Result<Observation, MapeError> {
        let unknown = || MapeError::UnknownTouchpoint { service: service.into(), parameter: parameter.into() };
        let (svc, param) =
            self.touchpoints.iter().find(|(s, p)| &**s == service && &**p == parameter).ok_or_else(unknown)?;
        let value = sensor.read(parameter).ok_or_else(unknown)?;
        Ok(Observation { service: svc.clone(), parameter: param.clone(), value, timestamp: now })
    }
}

/// Output of analysis: a policy whose when-clause held.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Symptom {
    pub policy: Ident,
    /// Latest values of every stream the when-clause reads.
    pub snapshot: Vec<Observation>,
    pub raised_at: Millis,
}

impl Symptom {
    /// Timestamp of the freshest observation that contributed.
    pub fn latest_observation_time(&self) -> Millis {
        self.snapshot.iter().map(|o| o.timestamp).max().unwrap_or(self.raised_at)
    }
}

/// Last time each policy raised a symptom.
#[derive(Clone, Debug, Default)]
pub struct Cooldowns {
    last: BTreeMap<Ident, Millis>,
}

impl Cooldowns {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn ready(&self, policy: &Policy, now: Millis) -> bool {
        match self.last.get(&policy.name) {
            Some(&t) => now.saturating_sub(t) >= policy.cooldown_ms,
            None => true,
        }
    }

    pub fn record(&mut self, symptoms: &[Symptom]) {
        for s in symptoms {
            self.last.insert(s.policy.clone(), s.raised_at);
        }
    }

    pub fn last_raised(&self, policy: &str) -> Option<Millis> {
        self.last.get(policy).copied()
    }
}

fn condition_holds(kb: &KnowledgeBase, policy: &Policy, cond: &Condition, now: Millis) -> Result<bool, MapeError> {
    let mismatch = |left: &Value, right: &Value| MapeError::TypeMismatch {
        policy: policy.name.to_string(),
        left: format!("{} {}", left.type_name(), left),
        right: format!("{} {}", right.type_name(), right),
    };
    match cond {
        Condition::Compare(c) => {
            let Some(entry) = kb.latest(&c.service, &c.parameter) else {
                return Ok(false);
            };
            if !c.op.is_equality() && !(entry.value.is_numeric() && c.value.is_numeric()) {
                return Err(mismatch(&entry.value, &c.value));
            }
            let ord = entry.value.compare(&c.value).ok_or_else(|| mismatch(&entry.value, &c.value))?;
            Ok(c.op.holds(ord))
        }
        Condition::Elapsed { elapsed_since: e } => {
            let Some(entry) = kb.latest(&e.service, &e.parameter) else {
                return Ok(false);
            };
            let ord = entry.value.compare(&e.value).ok_or_else(|| mismatch(&entry.value, &e.value))?;
            Ok(ord.is_eq() && now >= entry.since.saturating_add(e.ms))
        }
    }
}

/// Evaluates every policy over the latest knowledge, in declaration order.
/// Pure: neither the knowledge base nor the cooldown record is modified.
pub fn analyze(
    kb: &KnowledgeBase,
    policies: &[Policy],
    now: Millis,
    cooldowns: &Cooldowns,
) -> Result<Vec<Symptom>, MapeError> {
    let mut symptoms = Vec::new();
    for policy in policies {
        let mut all = true;
        for cond in &policy.when {
            if !condition_holds(kb, policy, cond, now)? {
                all = false;
                break;
            }
        }
        if !all || !cooldowns.ready(policy, now) {
            continue;
        }
        let mut snapshot: Vec<Observation> = Vec::with_capacity(policy.when.len());
        for cond in &policy.when {
            let (s, p) = cond.stream();
            if snapshot.iter().any(|o| o.service == *s && o.parameter == *p) {
                continue;
            }
            if let Some(obs) = kb.latest_observation(s, p) {
                snapshot.push(obs);
            }
        }
        symptoms.push(Symptom { policy: policy.name.clone(), snapshot, raised_at: now });
    }
    Ok(symptoms)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdaptationPlan {
    pub id: Ident,
    pub symptom: Symptom,
    pub actions: Vec<PlannedAction>,
}

/// Turns symptoms into plans with run-unique ids of the form `<prefix>#<n>`.
#[derive(Clone, Debug)]
pub struct Planner {
    prefix: Ident,
    issued: u64,
}

impl Planner {
    pub fn new(prefix: &str) -> Self {
        Planner { prefix: prefix.into(), issued: 0 }
    }

    pub fn issued(&self) -> u64 {
        self.issued
    }

    pub fn plan(&mut self, symptom: &Symptom, policies: &[Policy]) -> Result<AdaptationPlan, MapeError> {
        let policy = policies
            .iter()
            .find(|p| p.name == symptom.policy)
            .ok_or_else(|| MapeError::UnknownPolicy(symptom.policy.to_string()))?;
        self.issued += 1;
        Ok(AdaptationPlan {
            id: format!("{}#{}", self.prefix, self.issued).into(),
            symptom: symptom.clone(),
            actions: policy.then.clone(),
        })
    }
}

/// One scheduled actuation.
#[derive(Clone, Debug, PartialEq)]
pub struct Dispatch {
    pub plan: Ident,
    pub index: usize,
    pub action: PlannedAction,
    /// When the actuation message leaves the executor.
    pub send_at: Millis,
    /// Earliest time the actuation takes effect (jitter-free path latency).
    pub effective_at: Millis,
}

#[derive(Clone, Debug, Default)]
pub struct Executor {
    dispatched: BTreeSet<Ident>,
}

impl Executor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn has_dispatched(&self, plan: &str) -> bool {
        self.dispatched.contains(plan)
    }

    /// Schedules every action of `plan`. `latency_to` gives the path latency
    /// from the executor to a target service, or `None` if unreachable.
    /// Nothing is dispatched unless every target is reachable.
    pub fn execute(
        &mut self,
        plan: &AdaptationPlan,
        now: Millis,
        latency_to: impl Fn(&str) -> Option<Millis>,
    ) -> Result<Vec<Dispatch>, MapeError> {
        if self.dispatched.contains(&plan.id) {
            return Err(MapeError::DoubleDispatch(plan.id.to_string()));
        }
        let mut out = Vec::with_capacity(plan.actions.len());
        for (index, action) in plan.actions.iter().enumerate() {
            let latency = latency_to(&action.service).ok_or_else(|| MapeError::UnreachableTarget {
                plan: plan.id.to_string(),
                service: action.service.to_string(),
            })?;
            let send_at = now + action.delay_ms;
            out.push(Dispatch {
                plan: plan.id.clone(),
                index,
                action: action.clone(),
                send_at,
                effective_at: send_at + latency,
            });
        }
        self.dispatched.insert(plan.id.clone());
        Ok(out)
    }
}
