//! Control modes for groups of loops: centralized master-slave (state
//! aggregation plus plan delegation) and decentralized peer rounds
//! (propose, decide, acknowledge), and the interaction taxonomy every
//! simulator message is labelled with.

mod exact;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::mape::{AdaptationPlan, KnowledgeBase, Observation, PlannedAction};
use crate::model::{Domain, ValidationReport};
use crate::placement::{LoopSpec, Role};
use crate::value::{Ident, Millis, Value, ValueType};

use exact::Dyadic;

/// Which leg of a control loop an inter-component message travels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    MonitorToAnalyze,
    AnalyzeToPlan,
    PlanToExecute,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InteractionKind {
    /// Manager reads the managed element (device → monitor).
    Sense,
    /// Manager acts on the managed element (executor → device).
    Actuate,
    InterComponent(Stage),
    /// Same-type components, master handing work to a slave.
    Delegation,
    /// Same-type components agreeing as peers.
    Coordination,
}

impl InteractionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            InteractionKind::Sense => "sense",
            InteractionKind::Actuate => "actuate",
            InteractionKind::InterComponent(Stage::MonitorToAnalyze) => "monitor>analyze",
            InteractionKind::InterComponent(Stage::AnalyzeToPlan) => "analyze>plan",
            InteractionKind::InterComponent(Stage::PlanToExecute) => "plan>execute",
            InteractionKind::Delegation => "delegation",
            InteractionKind::Coordination => "coordination",
        }
    }

    pub const ALL: [InteractionKind; 7] = [
        InteractionKind::Sense,
        InteractionKind::Actuate,
        InteractionKind::InterComponent(Stage::MonitorToAnalyze),
        InteractionKind::InterComponent(Stage::AnalyzeToPlan),
        InteractionKind::InterComponent(Stage::PlanToExecute),
        InteractionKind::Delegation,
        InteractionKind::Coordination,
    ];
}

impl fmt::Display for InteractionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for InteractionKind {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combinator {
    Sum,
    Mean,
    Max,
    Min,
    Vector,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationInput {
    #[serde(rename = "loop")]
    pub loop_id: Ident,
    pub service: Ident,
    pub parameter: Ident,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamRef {
    pub service: Ident,
    pub parameter: Ident,
}

/// Builds one system-state parameter out of slave parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationSpec {
    pub name: Ident,
    pub inputs: Vec<AggregationInput>,
    pub combinator: Combinator,
    pub output: StreamRef,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ControlMode {
    Centralized { master: Ident, aggregations: Vec<AggregationSpec> },
    Decentralized { group: Vec<Ident>, coordinate: Vec<Role> },
}

impl ControlMode {
    pub fn name(&self) -> &'static str {
        match self {
            ControlMode::Centralized { .. } => "centralized",
            ControlMode::Decentralized { .. } => "decentralized",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoordError {
    #[error("aggregation '{aggregation}': {detail}")]
    TypeMismatch { aggregation: String, detail: String },
    #[error("plan {plan}: action on '{service}' belongs to no slave")]
    OrphanAction { plan: String, service: String },
    #[error("plan {plan}: action on '{service}' belongs to several slaves")]
    AmbiguousAction { plan: String, service: String },
    #[error("round {round}: no proposal or abstention from '{member}'")]
    MissingProposal { round: String, member: String },
    #[error("round {round}: '{member}' is not a group member")]
    NotAMember { round: String, member: String },
}

/// Applies a combinator. Numeric combinators work on exact rationals and
/// round once (ties to even) to `output`, integer or real; with no declared
/// type the result is integer iff every input is. Vector keeps input order.
pub fn combine(
    aggregation: &str,
    combinator: Combinator,
    values: &[Value],
    output: Option<&ValueType>,
) -> Result<Value, CoordError> {
    let mismatch = |detail: String| CoordError::TypeMismatch { aggregation: aggregation.into(), detail };
    if values.is_empty() {
        return Err(mismatch("no inputs".into()));
    }
    if combinator == Combinator::Vector {
        return Ok(Value::Tuple(values.to_vec()));
    }
    let mut nums = Vec::with_capacity(values.len());
    for v in values {
        nums.push(match v {
            Value::Int(i) => Dyadic::from_i64(*i),
            Value::Real(x) if x.is_finite() => Dyadic::from_f64(*x),
            other => return Err(mismatch(format!("{combinator:?} needs numeric inputs, got {}", other.type_name()))),
        });
    }
    let integer_out = match output {
        Some(ValueType::Integer) => true,
        Some(ValueType::Real) => false,
        Some(t) => return Err(mismatch(format!("output type {t} is not numeric"))),
        None => values.iter().all(|v| matches!(v, Value::Int(_))),
    };
    let (total, divisor) = match combinator {
        Combinator::Sum => (Dyadic::sum(&nums), 1),
        Combinator::Mean => (Dyadic::sum(&nums), nums.len() as u64),
        Combinator::Max => (nums.iter().max().cloned().expect("non-empty"), 1),
        Combinator::Min => (nums.iter().min().cloned().expect("non-empty"), 1),
        Combinator::Vector => unreachable!(),
    };
    if integer_out {
        total.div_to_i64(divisor).map(Value::Int).ok_or_else(|| mismatch("integer result out of range".into()))
    } else {
        Ok(Value::Real(total.div_to_f64(divisor)))
    }
}

/// Computes a system-state observation from the master's knowledge. Returns
/// `None` while any input has not been forwarded yet.
pub fn aggregate(
    spec: &AggregationSpec,
    state: &KnowledgeBase,
    output: Option<&ValueType>,
    now: Millis,
) -> Result<Option<Observation>, CoordError> {
    let mut values = Vec::with_capacity(spec.inputs.len());
    for input in &spec.inputs {
        match state.latest(&input.service, &input.parameter) {
            Some(entry) => values.push(entry.value.clone()),
            None => return Ok(None),
        }
    }
    let value = combine(&spec.name, spec.combinator, &values, output)?;
    Ok(Some(Observation {
        service: spec.output.service.clone(),
        parameter: spec.output.parameter.clone(),
        value,
        timestamp: now,
    }))
}

/// A slave-to-master state update.
#[derive(Clone, Debug, PartialEq)]
pub struct Forward {
    pub slave: Ident,
    pub master: Ident,
    pub observation: Observation,
}

/// Remembers the last value forwarded per stream so only changes go out.
#[derive(Clone, Debug, Default)]
pub struct ForwardTracker {
    last: BTreeMap<(Ident, Ident), Value>,
}

impl ForwardTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// One forward per observed parameter in `params` whose value differs
    /// from what was last sent (or that was never sent).
    pub fn forward_state(
        &mut self,
        slave: &Ident,
        master: &Ident,
        params: &BTreeSet<(Ident, Ident)>,
        observations: &[Observation],
    ) -> Vec<Forward> {
        let mut out = Vec::new();
        for obs in observations {
            let key = (obs.service.clone(), obs.parameter.clone());
            if !params.contains(&key) {
                continue;
            }
            if self.last.get(&key) == Some(&obs.value) {
                continue;
            }
            self.last.insert(key, obs.value.clone());
            out.push(Forward { slave: slave.clone(), master: master.clone(), observation: obs.clone() });
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubPlan {
    pub slave: Ident,
    pub plan: AdaptationPlan,
}

/// Splits a master plan by owning slave. Sub-plans come out in order of
/// each slave's first action and keep action order; ids are `<plan>><slave>`.
pub fn delegate(plan: &AdaptationPlan, slaves: &[(Ident, BTreeSet<Ident>)]) -> Result<Vec<SubPlan>, CoordError> {
    let mut parts: Vec<(Ident, Vec<PlannedAction>)> = Vec::new();
    for action in &plan.actions {
        let mut owners = slaves.iter().filter(|(_, scope)| scope.contains(&action.service));
        let Some((owner, _)) = owners.next() else {
            return Err(CoordError::OrphanAction { plan: plan.id.to_string(), service: action.service.to_string() });
        };
        if owners.next().is_some() {
            return Err(CoordError::AmbiguousAction { plan: plan.id.to_string(), service: action.service.to_string() });
        }
        match parts.iter_mut().find(|(s, _)| s == owner) {
            Some((_, actions)) => actions.push(action.clone()),
            None => parts.push((owner.clone(), vec![action.clone()])),
        }
    }
    Ok(parts
        .into_iter()
        .map(|(slave, actions)| SubPlan {
            plan: AdaptationPlan {
                id: format!("{}>{}", plan.id, slave).into(),
                symptom: plan.symptom.clone(),
                actions,
            },
            slave,
        })
        .collect())
}

/// What the round settled on.
#[derive(Clone, Debug, PartialEq)]
pub enum Decision<P> {
    NoOp,
    Chosen { proposer: Ident, proposal: P },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinationRound<P> {
    pub id: Ident,
    pub activity: Role,
    pub leader: Ident,
    /// `None` marks an explicit abstention.
    pub proposals: BTreeMap<Ident, Option<P>>,
    pub decided: Decision<P>,
}

pub fn leader_of(group: &[Ident]) -> Option<&Ident> {
    group.iter().min()
}

/// Decides a round once every member has proposed or abstained: the leader
/// is the smallest loop id and the lowest-id non-abstaining proposal wins.
pub fn coordinate<P: Clone>(
    round: &str,
    group: &[Ident],
    activity: Role,
    proposals: &BTreeMap<Ident, Option<P>>,
) -> Result<CoordinationRound<P>, CoordError> {
    for member in proposals.keys() {
        if !group.contains(member) {
            return Err(CoordError::NotAMember { round: round.into(), member: member.to_string() });
        }
    }
    for member in group {
        if !proposals.contains_key(member) {
            return Err(CoordError::MissingProposal { round: round.into(), member: member.to_string() });
        }
    }
    let leader = leader_of(group).cloned().unwrap_or_else(|| Ident::from(""));
    let decided = proposals
        .iter()
        .find_map(|(member, p)| p.as_ref().map(|p| (member.clone(), p.clone())))
        .map_or(Decision::NoOp, |(proposer, proposal)| Decision::Chosen { proposer, proposal });
    Ok(CoordinationRound { id: round.into(), activity, leader, proposals: proposals.clone(), decided })
}

/// Leader-side state of one round, advanced by message deliveries.
#[derive(Clone, Debug)]
pub struct RoundState<P> {
    pub id: Ident,
    pub activity: Role,
    pub group: Vec<Ident>,
    pub opened_at: Millis,
    pub deadline: Millis,
    proposals: BTreeMap<Ident, Option<P>>,
    decided: Option<CoordinationRound<P>>,
    acks: BTreeSet<Ident>,
}

impl<P: Clone> RoundState<P> {
    pub fn open(id: &str, activity: Role, group: &[Ident], now: Millis, timeout: Millis) -> Self {
        RoundState {
            id: id.into(),
            activity,
            group: group.to_vec(),
            opened_at: now,
            deadline: now + timeout,
            proposals: BTreeMap::new(),
            decided: None,
            acks: BTreeSet::new(),
        }
    }

    /// Records a proposal; returns the decided round once the last one is in.
    pub fn on_proposal(
        &mut self,
        member: &Ident,
        proposal: Option<P>,
    ) -> Result<Option<&CoordinationRound<P>>, CoordError> {
        if !self.group.contains(member) {
            return Err(CoordError::NotAMember { round: self.id.to_string(), member: member.to_string() });
        }
        self.proposals.insert(member.clone(), proposal);
        if self.decided.is_none() && self.proposals.len() == self.group.len() {
            self.decided = Some(coordinate(&self.id, &self.group, self.activity, &self.proposals)?);
            return Ok(self.decided.as_ref());
        }
        Ok(None)
    }

    pub fn decided(&self) -> Option<&CoordinationRound<P>> {
        self.decided.as_ref()
    }

    /// Records an acknowledgement; true once every member has acknowledged.
    pub fn on_ack(&mut self, member: &Ident) -> bool {
        if self.group.contains(member) {
            self.acks.insert(member.clone());
        }
        self.is_complete()
    }

    pub fn is_complete(&self) -> bool {
        self.decided.is_some() && self.acks.len() == self.group.len()
    }

    pub fn proposal_of(&self, member: &str) -> Option<&Option<P>> {
        self.proposals.get(member)
    }
}

/// Round timeout: ten times the largest one-way latency between members,
/// with a floor of one millisecond for co-located groups.
pub fn round_timeout(max_member_latency: Millis) -> Millis {
    10 * max_member_latency.max(1)
}

/// Structural checks for a control mode against the configured loops.
pub fn validate_control(mode: &ControlMode, loops: &[LoopSpec], domain: &Domain) -> ValidationReport {
    let mut report = ValidationReport::default();
    let known: BTreeSet<&str> = loops.iter().map(|l| &*l.id).collect();
    match mode {
        ControlMode::Centralized { master, aggregations } => {
            if !known.contains(&**master) {
                report.push("control.master.loop", format!("unknown loop '{master}'"));
            }
            if loops.iter().filter(|l| l.id != *master).count() == 0 {
                report.push("control.master.loop", "centralized mode needs at least one slave loop");
            }
            for (ai, agg) in aggregations.iter().enumerate() {
                let path = format!("control.master.aggregations[{ai}]");
                if agg.inputs.is_empty() {
                    report.push(path.clone(), "inputs must be non-empty");
                }
                for (ii, input) in agg.inputs.iter().enumerate() {
                    let ipath = format!("{path}.inputs[{ii}]");
                    if input.loop_id == *master {
                        report.push(ipath.clone(), "the master cannot be its own slave");
                    }
                    match loops.iter().find(|l| l.id == input.loop_id) {
                        None => report.push(ipath.clone(), format!("unknown loop '{}'", input.loop_id)),
                        Some(l) if !l.scope.contains(&input.service) => report
                            .push(ipath.clone(), format!("service '{}' is outside loop '{}'", input.service, l.id)),
                        _ => {}
                    }
                    match domain.parameter(&input.service, &input.parameter) {
                        None => {
                            report.push(ipath, format!("unknown parameter '{}.{}'", input.service, input.parameter))
                        }
                        Some(p) if agg.combinator != Combinator::Vector && !p.value_type.is_numeric() => report.push(
                            ipath,
                            format!("{:?} needs numeric inputs, '{}' is {}", agg.combinator, p.name, p.value_type),
                        ),
                        _ => {}
                    }
                }
                match domain.parameter(&agg.output.service, &agg.output.parameter) {
                    None if agg.combinator != Combinator::Vector => report.push(
                        format!("{path}.output"),
                        format!("output '{}.{}' is not declared", agg.output.service, agg.output.parameter),
                    ),
                    Some(p) if agg.combinator != Combinator::Vector && !p.value_type.is_numeric() => {
                        report.push(format!("{path}.output"), "numeric aggregation needs a numeric output")
                    }
                    _ => {}
                }
            }
        }
        ControlMode::Decentralized { group, coordinate } => {
            let distinct: BTreeSet<_> = group.iter().collect();
            if distinct.len() != group.len() {
                report.push("control.group", "duplicate loop in group");
            }
            if distinct.len() < 2 {
                report.push("control.group", "a decentralized group needs at least two loops");
            }
            for id in group {
                if !known.contains(&**id) {
                    report.push("control.group", format!("unknown loop '{id}'"));
                }
            }
            for role in coordinate {
                if *role != Role::Execute {
                    report.push("control.coordinate", format!("{role} rounds are not supported"));
                }
            }
        }
    }
    report
}
