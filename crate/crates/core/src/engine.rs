//! Runs a resolved scenario: devices, loop components and coordination
//! exchange messages through the simulated network until the horizon.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::coordination::{
    aggregate, delegate, leader_of, round_timeout, AggregationSpec, CoordError, Decision, ForwardTracker,
    InteractionKind, RoundState, Stage,
};
use crate::mape::{
    analyze, AdaptationPlan, Cooldowns, Executor, KnowledgeBase, MapeError, Observation, Planner, Policy, Symptom,
};
use crate::metrics::{DecisionSample, Metrics};
use crate::placement::Role;
use crate::scenario::{node_tiers, resolve, ControlConfig, Scenario, ScenarioError};
use crate::simnet::trace::Detail;
use crate::simnet::{Address, Network, Scheduler, SimError, TraceEvent, TraceHeader, TraceKind, TraceSink};
use crate::smartbuilding::{snapshot, BuildingParams, DeviceError, Environment, Office};
use crate::value::{Ident, Millis, Value, ValueType};

/// Knowledge keeps this many raw observations besides the latest values.
pub const KB_HISTORY_LIMIT: usize = 4096;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Mape(#[from] MapeError),
    #[error(transparent)]
    Coord(#[from] CoordError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("scenario has no building section")]
    NoBuilding,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OfficeResult {
    pub office: Ident,
    pub watt_ms: u64,
    pub kwh: f64,
    pub temp_c: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub seed: u64,
    pub config_digest: String,
    pub horizon_ms: Millis,
    pub metrics: Metrics,
    /// Discrete device states at the horizon.
    pub snapshot: BTreeMap<String, String>,
    pub offices: Vec<OfficeResult>,
}

impl RunReport {
    /// SHA-256 of the final snapshot, for side-by-side comparisons.
    pub fn snapshot_digest(&self) -> String {
        let text = serde_json::to_string(&self.snapshot).expect("string map serialises");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Simulates `scenario` with `seed` up to `horizon_ms`, streaming the trace
/// into `sink`.
pub fn simulate(
    scenario: &Scenario,
    seed: u64,
    horizon_ms: Millis,
    sink: &mut dyn TraceSink,
) -> Result<RunReport, EngineError> {
    let resolved = resolve(scenario)?;
    let config_digest = scenario.digest();
    let mut run = Run::new(&resolved.scenario, &resolved.placement, seed, sink)?;
    run.sink.header(&TraceHeader {
        trace: crate::simnet::trace::TRACE_FORMAT,
        seed,
        config_digest: config_digest.clone(),
        horizon_ms,
        nodes: node_tiers(&resolved.scenario.topology),
    });
    run.start(&resolved.scenario)?;
    while let Some((t, event)) = run.sched.pop_until(horizon_ms) {
        run.now = t;
        run.handle(event)?;
    }
    run.now = horizon_ms;
    let offices = run.finish();
    Ok(RunReport { seed, config_digest, horizon_ms, snapshot: snapshot(&run.offices), metrics: run.metrics, offices })
}

const ROLES: [Role; 5] = [Role::Monitor, Role::Analyze, Role::Plan, Role::Execute, Role::Knowledge];

fn ri(role: Role) -> usize {
    match role {
        Role::Monitor => 0,
        Role::Analyze => 1,
        Role::Plan => 2,
        Role::Execute => 3,
        Role::Knowledge => 4,
    }
}

#[derive(Clone)]
struct Endpoint {
    addr: Address,
    label: Ident,
}

struct ForwardRt {
    master: usize,
    params: BTreeSet<(Ident, Ident)>,
    tracker: ForwardTracker,
}

struct LoopRt {
    id: Ident,
    ends: [Endpoint; 5],
    policies: Vec<Policy>,
    kb: KnowledgeBase,
    cooldowns: Cooldowns,
    planner: Planner,
    executor: Executor,
    analyze_pending: bool,
    scope: BTreeSet<Ident>,
    forward: Option<ForwardRt>,
    /// Set on the master: slaves with their scopes, and aggregations.
    slaves: Vec<(Ident, BTreeSet<Ident>)>,
    aggregations: Vec<(AggregationSpec, Option<ValueType>)>,
    member: bool,
    pending: VecDeque<AdaptationPlan>,
    requested: bool,
}

struct DeviceRt {
    end: Endpoint,
    owner: Option<usize>,
    /// Parameters with their sample intervals.
    params: Vec<(Ident, Millis)>,
}

struct GroupRt {
    members: Vec<usize>,
    ids: Vec<Ident>,
    leader: usize,
    timeout: Millis,
    rounds: u64,
    current: Option<RoundState<AdaptationPlan>>,
    wanted: bool,
    more: bool,
    suppressed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Target {
    Component(usize, Role),
    Device(usize, usize),
}

enum Payload {
    Sense(Vec<Observation>),
    Observe(Vec<Observation>),
    Forward(Observation),
    Symptom(Symptom),
    Plan(AdaptationPlan),
    SubPlan(AdaptationPlan),
    Actuate(Actuation),
    Request,
    Solicit(Ident),
    Propose(Ident, Option<AdaptationPlan>),
    Decide(Ident, Decision<AdaptationPlan>),
    Ack { round: Ident, more: bool, suppressed: bool },
}

struct Actuation {
    plan: Ident,
    index: usize,
    round: Option<Ident>,
    service: Ident,
    command: Ident,
    arg: Option<Value>,
}

struct InFlight {
    msg: Option<u64>,
    kind: InteractionKind,
    from: Ident,
    to: Target,
    payload: Payload,
}

enum Event {
    Env(usize),
    Tick(usize),
    Deliver(Box<InFlight>),
    Analyze(usize),
    SendActuation(usize, Box<Actuation>),
    RoundTimeout(Ident),
}

struct Origin {
    policy: Ident,
    observed_at: Millis,
    measured: bool,
}

struct Run<'s> {
    now: Millis,
    sched: Scheduler<Event>,
    net: Network,
    sink: &'s mut dyn TraceSink,
    metrics: Metrics,
    params: BuildingParams,
    env: Environment,
    timeline: Vec<crate::smartbuilding::EnvEntry>,
    offices: Vec<Office>,
    devices: Vec<Vec<DeviceRt>>,
    by_service: BTreeMap<Ident, (usize, usize)>,
    tick_period: Vec<Millis>,
    loops: Vec<LoopRt>,
    group: Option<GroupRt>,
    origins: BTreeMap<Ident, Origin>,
    /// Derived plan id (sub-plan, round execution) to the root plan id.
    roots: BTreeMap<Ident, Ident>,
}

fn gcd(a: Millis, b: Millis) -> Millis {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl<'s> Run<'s> {
    fn new(
        s: &Scenario,
        placement: &crate::placement::Placement,
        seed: u64,
        sink: &'s mut dyn TraceSink,
    ) -> Result<Self, EngineError> {
        let building = s.building.as_ref().ok_or(EngineError::NoBuilding)?;
        let params = building.params.clone();
        let net = Network::new(&s.topology, seed);

        let mut loops = Vec::with_capacity(s.loops.len());
        for spec in &s.loops {
            let ends = ROLES.map(|role| {
                let node = placement.node_of(&spec.id, role).cloned().unwrap_or_else(|| Ident::from(""));
                let component = format!("{}/{}", spec.id, role);
                Endpoint { label: format!("{component}@{node}").into(), addr: Address::new(&node, &component) }
            });
            let policies =
                spec.policies.iter().filter_map(|name| s.policies.iter().find(|p| &p.name == name).cloned()).collect();
            loops.push(LoopRt {
                id: spec.id.clone(),
                ends,
                policies,
                kb: KnowledgeBase::with_history_limit(KB_HISTORY_LIMIT),
                cooldowns: Cooldowns::new(),
                planner: Planner::new(&spec.id),
                executor: Executor::new(),
                analyze_pending: false,
                scope: spec.scope.iter().cloned().collect(),
                forward: None,
                slaves: Vec::new(),
                aggregations: Vec::new(),
                member: false,
                pending: VecDeque::new(),
                requested: false,
            });
        }
        let ids_in_order: Vec<Ident> = loops.iter().map(|l: &LoopRt| l.id.clone()).collect();
        let loop_idx = |id: &str| ids_in_order.iter().position(|l| &**l == id);

        let mut group = None;
        match &s.control {
            Some(ControlConfig::Centralized { master }) => {
                let m = loop_idx(&master.loop_id).expect("validated master");
                let slaves: Vec<(Ident, BTreeSet<Ident>)> = loops
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| i != m)
                    .map(|(_, l)| (l.id.clone(), l.scope.clone()))
                    .collect();
                for (i, l) in loops.iter_mut().enumerate() {
                    if i == m {
                        continue;
                    }
                    let params = master
                        .aggregations
                        .iter()
                        .flat_map(|a| a.inputs.iter())
                        .filter(|inp| inp.loop_id == l.id)
                        .map(|inp| (inp.service.clone(), inp.parameter.clone()))
                        .collect();
                    l.forward = Some(ForwardRt { master: m, params, tracker: ForwardTracker::new() });
                }
                loops[m].slaves = slaves;
                loops[m].aggregations = master
                    .aggregations
                    .iter()
                    .map(|a| {
                        let t =
                            s.domain.parameter(&a.output.service, &a.output.parameter).map(|p| p.value_type.clone());
                        (a.clone(), t)
                    })
                    .collect();
            }
            Some(ControlConfig::Decentralized { group: ids, .. }) => {
                let members: Vec<usize> = ids.iter().map(|id| loop_idx(id).expect("validated group")).collect();
                for &m in &members {
                    loops[m].member = true;
                }
                let leader_id = leader_of(ids).expect("non-empty group");
                let leader = loop_idx(leader_id).expect("validated group");
                let mut max_lat = 0;
                for &a in &members {
                    for &b in &members {
                        let (na, nb) =
                            (&loops[a].ends[ri(Role::Execute)].addr.node, &loops[b].ends[ri(Role::Execute)].addr.node);
                        max_lat = max_lat.max(net.routes().latency(na, nb).unwrap_or(0));
                    }
                }
                group = Some(GroupRt {
                    members,
                    ids: ids.clone(),
                    leader,
                    timeout: round_timeout(max_lat),
                    rounds: 0,
                    current: None,
                    wanted: false,
                    more: false,
                    suppressed: 0,
                });
            }
            None => {}
        }

        let offices: Vec<Office> = building.offices.iter().map(|o| Office::new(o, &params)).collect();
        let mut devices = Vec::with_capacity(offices.len());
        let mut by_service = BTreeMap::new();
        let mut tick_period = Vec::with_capacity(offices.len());
        for (oi, office) in offices.iter().enumerate() {
            let mut rts = Vec::with_capacity(office.devices.len());
            let mut period = 0;
            for (di, d) in office.devices.iter().enumerate() {
                let node =
                    s.topology.host_of(&d.service).map(|n| n.id.clone()).unwrap_or_else(|| d.service.to_string());
                let service = s.domain.service(&d.service);
                let dparams: Vec<(Ident, Millis)> = service
                    .map(|svc| {
                        svc.parameters.iter().map(|p| (Ident::from(p.name.as_str()), p.sample_interval_ms)).collect()
                    })
                    .unwrap_or_default();
                for (_, iv) in &dparams {
                    period = gcd(period, *iv);
                }
                let owner = loops.iter().position(|l| l.scope.contains(&d.service));
                by_service.insert(d.service.clone(), (oi, di));
                rts.push(DeviceRt {
                    end: Endpoint { addr: Address::new(&node, &d.service), label: d.service.clone() },
                    owner,
                    params: dparams,
                });
            }
            devices.push(rts);
            tick_period.push(period.max(1));
        }

        Ok(Run {
            now: 0,
            sched: Scheduler::new(),
            net,
            sink,
            metrics: Metrics::default(),
            params,
            env: Environment::default(),
            timeline: s.environment.clone(),
            offices,
            devices,
            by_service,
            tick_period,
            loops,
            group,
            origins: BTreeMap::new(),
            roots: BTreeMap::new(),
        })
    }

    fn trace(&mut self, kind: TraceKind, src: Ident, dst: Ident, detail: serde_json::Value) {
        self.sink.record(TraceEvent { t: self.now, kind, src, dst, detail: Detail::Json(detail) });
    }

    fn start(&mut self, _s: &Scenario) -> Result<(), EngineError> {
        for oi in 0..self.offices.len() {
            let office = &self.offices[oi];
            let mut events = Vec::new();
            for d in &office.devices {
                events.push((
                    d.service.clone(),
                    json!({"service": d.service, "kind": d.kind.as_str(), "power_w": d.power_w(&self.params), "state": d.label()}),
                ));
            }
            events.push((office.id.clone(), json!({"office": office.id, "temp_c": office.temp_c})));
            for (src, detail) in events {
                self.trace(TraceKind::Init, src.clone(), src, detail);
            }
        }
        for i in 0..self.timeline.len() {
            self.sched.schedule(Event::Env(i), self.timeline[i].t)?;
        }
        for oi in 0..self.offices.len() {
            self.sched.schedule(Event::Tick(oi), 0)?;
        }
        Ok(())
    }

    fn finish(&mut self) -> Vec<OfficeResult> {
        let mut out = Vec::with_capacity(self.offices.len());
        for oi in 0..self.offices.len() {
            self.offices[oi].advance(self.now, &self.env, &self.params);
            let o = &self.offices[oi];
            let devices: BTreeMap<&str, &str> =
                o.devices.iter().filter_map(|d| d.label().map(|l| (&*d.service, l))).collect();
            let detail =
                json!({"office": o.id, "watt_ms": o.watt_ms(), "kwh": o.kwh(), "temp_c": o.temp_c, "devices": devices});
            let r = OfficeResult { office: o.id.clone(), watt_ms: o.watt_ms(), kwh: o.kwh(), temp_c: o.temp_c };
            let id = o.id.clone();
            self.trace(TraceKind::Final, id.clone(), id, detail);
            self.metrics.office_watt_ms.insert(r.office.clone(), r.watt_ms);
            out.push(r);
        }
        out
    }

    fn endpoint(&self, t: Target) -> &Endpoint {
        match t {
            Target::Component(l, role) => &self.loops[l].ends[ri(role)],
            Target::Device(o, d) => &self.devices[o][d].end,
        }
    }

    /// Sends over the network, or hands over locally when both ends share a
    /// node and neither is a device.
    fn send(&mut self, kind: InteractionKind, payload: Payload, from: Target, to: Target) -> Result<(), EngineError> {
        let src = self.endpoint(from).clone();
        let dst = self.endpoint(to).clone();
        let local = src.addr.node == dst.addr.node
            && matches!(from, Target::Component(..))
            && matches!(to, Target::Component(..));
        if local {
            let f = InFlight { msg: None, kind, from: src.label, to, payload };
            self.sched.schedule(Event::Deliver(Box::new(f)), self.now)?;
            return Ok(());
        }
        let msg = self.net.send(kind, (), src.addr, dst.addr, self.now)?;
        self.metrics.messages += 1;
        *self.metrics.messages_by_kind.entry(kind.as_str()).or_default() += 1;
        let routes = self.net.routes();
        for pair in msg.route.nodes.windows(2) {
            if let (Some(a), Some(b)) = (routes.tier(&pair[0]), routes.tier(&pair[1])) {
                *self.metrics.hops.entry((a, b)).or_default() += 1;
            }
        }
        self.sink.record(TraceEvent {
            t: self.now,
            kind: TraceKind::Send,
            src: src.label.clone(),
            dst: dst.label,
            detail: Detail::Send {
                msg: msg.id,
                ia: kind,
                path: msg.route.nodes.clone(),
                deliver_at: msg.delivery_time,
            },
        });
        let f = InFlight { msg: Some(msg.id), kind, from: src.label, to, payload };
        self.sched.schedule(Event::Deliver(Box::new(f)), msg.delivery_time)?;
        Ok(())
    }

    fn handle(&mut self, event: Event) -> Result<(), EngineError> {
        match event {
            Event::Env(i) => self.on_env(i),
            Event::Tick(o) => self.on_tick(o),
            Event::Deliver(f) => self.on_deliver(*f),
            Event::Analyze(l) => self.on_analyze(l),
            Event::SendActuation(l, a) => self.send_actuation(l, *a),
            Event::RoundTimeout(id) => self.on_round_timeout(id),
        }
    }

    fn on_env(&mut self, i: usize) -> Result<(), EngineError> {
        let entry = self.timeline[i].clone();
        let before = self.env;
        for o in &mut self.offices {
            o.advance(self.now, &before, &self.params);
        }
        self.env.apply(&entry);
        let env_id: Ident = "env".into();
        self.trace(
            TraceKind::Env,
            env_id.clone(),
            env_id.clone(),
            json!({"weather": self.env.weather.as_str(), "outside_temp": self.env.outside_temp, "actions": entry.actions}),
        );
        if before.weather != self.env.weather {
            // Weather is exposed through each window.
            for oi in 0..self.offices.len() {
                let di = crate::smartbuilding::DeviceKind::Window as usize;
                let service = self.offices[oi].devices[di].service.clone();
                let obs = Observation::new(&service, "weather", Value::symbol(self.env.weather.as_str()), self.now);
                self.sense(oi, di, vec![obs])?;
            }
        }
        for a in &entry.actions {
            let &(oi, di) = self.by_service.get(&a.service).expect("validated environment");
            self.actuate(oi, di, &a.command, a.arg.as_ref(), json!({"source": "env"}))?;
        }
        Ok(())
    }

    fn on_tick(&mut self, oi: usize) -> Result<(), EngineError> {
        let period = self.tick_period[oi];
        self.offices[oi].advance(self.now, &self.env, &self.params);
        for di in 0..self.devices[oi].len() {
            let now = self.now;
            let obs: Vec<Observation> = self.devices[oi][di]
                .params
                .iter()
                .filter(|(_, iv)| now.is_multiple_of(*iv))
                .filter_map(|(p, _)| {
                    let d = &self.offices[oi].devices[di];
                    self.offices[oi].read(di, p, &self.env).map(|v| Observation {
                        service: d.service.clone(),
                        parameter: p.clone(),
                        value: v,
                        timestamp: now,
                    })
                })
                .collect();
            if !obs.is_empty() {
                self.sense(oi, di, obs)?;
            }
        }
        self.sched.schedule(Event::Tick(oi), self.now + period)?;
        Ok(())
    }

    fn sense(&mut self, oi: usize, di: usize, obs: Vec<Observation>) -> Result<(), EngineError> {
        let Some(owner) = self.devices[oi][di].owner else { return Ok(()) };
        self.send(
            InteractionKind::Sense,
            Payload::Sense(obs),
            Target::Device(oi, di),
            Target::Component(owner, Role::Monitor),
        )
    }

    /// Applies a command to a device, traces the effect and senses any change.
    fn actuate(
        &mut self,
        oi: usize,
        di: usize,
        command: &str,
        arg: Option<&Value>,
        mut detail: serde_json::Value,
    ) -> Result<Vec<Observation>, EngineError> {
        let changed = self.offices[oi].apply_command(di, command, arg, self.now, &self.env, &self.params)?;
        let d = &self.offices[oi].devices[di];
        let service = d.service.clone();
        if let Some(m) = detail.as_object_mut() {
            m.insert("service".into(), json!(service));
            m.insert("command".into(), json!(command));
            m.insert("arg".into(), json!(arg));
            m.insert("changed".into(), json!(!changed.is_empty()));
            m.insert("power_w".into(), json!(d.power_w(&self.params)));
            m.insert("state".into(), json!(d.label()));
        }
        self.metrics.actuations += 1;
        if !changed.is_empty() {
            self.metrics.state_changes += 1;
        }
        let src = detail.get("source").and_then(|s| s.as_str()).unwrap_or("env").to_string();
        self.trace(TraceKind::Effect, src.into(), service, detail);
        if !changed.is_empty() {
            self.sense(oi, di, changed.clone())?;
        }
        Ok(changed)
    }

    fn on_deliver(&mut self, f: InFlight) -> Result<(), EngineError> {
        if let Some(id) = f.msg {
            let dst = self.endpoint(f.to).label.clone();
            self.sink.record(TraceEvent {
                t: self.now,
                kind: TraceKind::Deliver,
                src: f.from.clone(),
                dst,
                detail: Detail::Deliver { msg: id, ia: f.kind },
            });
        }
        match (f.to, f.payload) {
            (Target::Component(l, Role::Monitor), Payload::Sense(obs)) => self.on_monitor(l, obs),
            (Target::Component(l, Role::Knowledge), Payload::Observe(obs)) => self.on_knowledge(l, obs),
            (Target::Component(l, Role::Knowledge), Payload::Forward(obs)) => self.on_forward(l, obs),
            (Target::Component(l, Role::Plan), Payload::Symptom(s)) => self.on_plan(l, s),
            (Target::Component(l, Role::Execute), Payload::Plan(p)) => self.on_execute(l, p),
            (Target::Component(l, Role::Execute), Payload::SubPlan(p)) => self.dispatch(l, &p, None, None),
            (Target::Device(o, d), Payload::Actuate(a)) => self.on_actuate(o, d, a),
            (Target::Component(l, Role::Execute), Payload::Request) => self.on_request(l),
            (Target::Component(l, Role::Execute), Payload::Solicit(round)) => self.on_solicit(l, round),
            (Target::Component(l, Role::Execute), Payload::Propose(round, p)) => self.on_propose(l, f.from, round, p),
            (Target::Component(l, Role::Execute), Payload::Decide(round, d)) => self.on_decide(l, round, d),
            (Target::Component(_, Role::Execute), Payload::Ack { round, more, suppressed }) => {
                self.on_ack(f.from, round, more, suppressed)
            }
            _ => unreachable!("message routed to a component that does not handle it"),
        }
    }

    fn on_monitor(&mut self, l: usize, obs: Vec<Observation>) -> Result<(), EngineError> {
        let mut forwards = Vec::new();
        if let Some(m) = self.loops[l].forward.as_ref().map(|f| f.master) {
            let slave = self.loops[l].id.clone();
            let master = self.loops[m].id.clone();
            let fw = self.loops[l].forward.as_mut().expect("forwarding slave");
            forwards = fw.tracker.forward_state(&slave, &master, &fw.params, &obs);
        }
        for fwd in forwards {
            let m = self.loops[l].forward.as_ref().map(|f| f.master).expect("forwarding slave");
            self.send(
                InteractionKind::InterComponent(Stage::MonitorToAnalyze),
                Payload::Forward(fwd.observation),
                Target::Component(l, Role::Monitor),
                Target::Component(m, Role::Knowledge),
            )?;
        }
        self.send(
            InteractionKind::InterComponent(Stage::MonitorToAnalyze),
            Payload::Observe(obs),
            Target::Component(l, Role::Monitor),
            Target::Component(l, Role::Knowledge),
        )
    }

    fn store(&mut self, l: usize, obs: Observation) -> Result<bool, EngineError> {
        match self.loops[l].kb.put(obs) {
            Ok(()) => Ok(true),
            Err(MapeError::StaleObservation { service, parameter, latest, got }) => {
                self.metrics.stale_observations += 1;
                let label = self.loops[l].ends[ri(Role::Knowledge)].label.clone();
                self.trace(
                    TraceKind::Stale,
                    label.clone(),
                    label,
                    json!({"service": service, "parameter": parameter, "latest": latest, "got": got}),
                );
                Ok(false)
            }
            Err(e) => Err(e.into()),
        }
    }

    fn request_analysis(&mut self, l: usize) -> Result<(), EngineError> {
        if !self.loops[l].analyze_pending && !self.loops[l].policies.is_empty() {
            self.loops[l].analyze_pending = true;
            self.sched.schedule(Event::Analyze(l), self.now)?;
        }
        Ok(())
    }

    fn on_knowledge(&mut self, l: usize, obs: Vec<Observation>) -> Result<(), EngineError> {
        for o in obs {
            self.store(l, o)?;
        }
        self.request_analysis(l)
    }

    fn on_forward(&mut self, l: usize, obs: Observation) -> Result<(), EngineError> {
        if !self.store(l, obs)? {
            return Ok(());
        }
        for i in 0..self.loops[l].aggregations.len() {
            let (spec, ty) = &self.loops[l].aggregations[i];
            let Some(out) = aggregate(spec, &self.loops[l].kb, ty.as_ref(), self.now)? else { continue };
            let name = spec.name.clone();
            self.metrics.aggregations += 1;
            let label = self.loops[l].ends[ri(Role::Knowledge)].label.clone();
            self.trace(
                TraceKind::Aggregate,
                label.clone(),
                label,
                json!({"aggregation": name, "service": out.service, "parameter": out.parameter, "value": out.value}),
            );
            self.store(l, out)?;
        }
        self.request_analysis(l)
    }

    fn on_analyze(&mut self, l: usize) -> Result<(), EngineError> {
        let lp = &mut self.loops[l];
        lp.analyze_pending = false;
        let symptoms = analyze(&lp.kb, &lp.policies, self.now, &lp.cooldowns)?;
        lp.cooldowns.record(&symptoms);
        let label = lp.ends[ri(Role::Analyze)].label.clone();
        for s in symptoms {
            self.metrics.symptoms += 1;
            self.trace(
                TraceKind::Symptom,
                label.clone(),
                label.clone(),
                json!({"policy": s.policy, "observed_at": s.latest_observation_time()}),
            );
            self.send(
                InteractionKind::InterComponent(Stage::AnalyzeToPlan),
                Payload::Symptom(s),
                Target::Component(l, Role::Analyze),
                Target::Component(l, Role::Plan),
            )?;
        }
        Ok(())
    }

    fn on_plan(&mut self, l: usize, s: Symptom) -> Result<(), EngineError> {
        let lp = &mut self.loops[l];
        let plan = lp.planner.plan(&s, &lp.policies)?;
        let label = lp.ends[ri(Role::Plan)].label.clone();
        self.metrics.plans += 1;
        self.origins.insert(
            plan.id.clone(),
            Origin { policy: s.policy.clone(), observed_at: s.latest_observation_time(), measured: false },
        );
        self.trace(
            TraceKind::Plan,
            label.clone(),
            label,
            json!({"plan": plan.id, "policy": s.policy, "actions": plan.actions}),
        );
        self.send(
            InteractionKind::InterComponent(Stage::PlanToExecute),
            Payload::Plan(plan),
            Target::Component(l, Role::Plan),
            Target::Component(l, Role::Execute),
        )
    }

    fn on_execute(&mut self, l: usize, plan: AdaptationPlan) -> Result<(), EngineError> {
        if !self.loops[l].slaves.is_empty() {
            let subs = delegate(&plan, &self.loops[l].slaves)?;
            let label = self.loops[l].ends[ri(Role::Execute)].label.clone();
            for sp in subs {
                let slave = self.loops.iter().position(|x| x.id == sp.slave).expect("slave loop");
                self.metrics.delegations += 1;
                self.roots.insert(sp.plan.id.clone(), plan.id.clone());
                self.trace(
                    TraceKind::Delegate,
                    label.clone(),
                    self.loops[slave].ends[ri(Role::Execute)].label.clone(),
                    json!({"plan": plan.id, "sub_plan": sp.plan.id, "slave": sp.slave, "actions": sp.plan.actions.len()}),
                );
                self.send(
                    InteractionKind::Delegation,
                    Payload::SubPlan(sp.plan),
                    Target::Component(l, Role::Execute),
                    Target::Component(slave, Role::Execute),
                )?;
            }
            return Ok(());
        }
        if self.loops[l].member {
            self.loops[l].pending.push_back(plan);
            return self.ask_for_round(l);
        }
        self.dispatch(l, &plan, None, None)
    }

    /// Executes `plan` and sends one actuation per action. `indices` maps
    /// the plan's actions back to the decided proposal's action indices.
    fn dispatch(
        &mut self,
        l: usize,
        plan: &AdaptationPlan,
        round: Option<&Ident>,
        indices: Option<&[usize]>,
    ) -> Result<(), EngineError> {
        let exec_node = self.loops[l].ends[ri(Role::Execute)].addr.node.clone();
        let routes = self.net.routes();
        let by_service = &self.by_service;
        let devices = &self.devices;
        let dispatches = self.loops[l].executor.execute(plan, self.now, |svc| {
            let &(o, d) = by_service.get(svc)?;
            routes.latency(&exec_node, &devices[o][d].end.addr.node)
        })?;
        let label = self.loops[l].ends[ri(Role::Execute)].label.clone();
        for d in dispatches {
            let index = indices.map_or(d.index, |ix| ix[d.index]);
            self.metrics.dispatches += 1;
            self.trace(
                TraceKind::Dispatch,
                label.clone(),
                d.action.service.clone(),
                json!({
                    "plan": d.plan, "action": index, "round": round, "service": d.action.service,
                    "command": d.action.command, "arg": d.action.arg, "send_at": d.send_at,
                }),
            );
            let a = Actuation {
                plan: d.plan.clone(),
                index,
                round: round.cloned(),
                service: d.action.service.clone(),
                command: d.action.command.clone(),
                arg: d.action.arg.clone(),
            };
            if d.send_at > self.now {
                self.sched.schedule(Event::SendActuation(l, Box::new(a)), d.send_at)?;
            } else {
                self.send_actuation(l, a)?;
            }
        }
        Ok(())
    }

    fn send_actuation(&mut self, l: usize, a: Actuation) -> Result<(), EngineError> {
        let &(o, d) = self.by_service.get(&a.service).expect("executor checked reachability");
        self.send(
            InteractionKind::Actuate,
            Payload::Actuate(a),
            Target::Component(l, Role::Execute),
            Target::Device(o, d),
        )
    }

    fn root_of(&self, plan: &Ident) -> Ident {
        let mut p = plan.clone();
        while let Some(r) = self.roots.get(&p) {
            p = r.clone();
        }
        p
    }

    fn on_actuate(&mut self, o: usize, d: usize, a: Actuation) -> Result<(), EngineError> {
        let root = self.root_of(&a.plan);
        let mut latency = None;
        if let Some(origin) = self.origins.get_mut(&root) {
            if !origin.measured {
                origin.measured = true;
                let ms = self.now - origin.observed_at;
                latency = Some(ms);
                self.metrics.decisions.push(DecisionSample {
                    plan: root.clone(),
                    policy: origin.policy.clone(),
                    latency_ms: ms,
                });
            }
        }
        let detail = json!({
            "source": "execute", "plan": a.plan, "root": root, "action": a.index, "round": a.round, "latency_ms": latency,
        });
        self.actuate(o, d, &a.command, a.arg.as_ref(), detail)?;
        Ok(())
    }

    // Decentralized execute rounds.

    fn group(&mut self) -> &mut GroupRt {
        self.group.as_mut().expect("decentralized run")
    }

    fn ask_for_round(&mut self, l: usize) -> Result<(), EngineError> {
        if self.loops[l].requested {
            return Ok(());
        }
        self.loops[l].requested = true;
        let leader = self.group().leader;
        self.send(
            InteractionKind::Coordination,
            Payload::Request,
            Target::Component(l, Role::Execute),
            Target::Component(leader, Role::Execute),
        )
    }

    fn on_request(&mut self, _leader: usize) -> Result<(), EngineError> {
        if self.group().current.is_some() {
            self.group().wanted = true;
            return Ok(());
        }
        self.open_round()
    }

    fn open_round(&mut self) -> Result<(), EngineError> {
        let now = self.now;
        let g = self.group();
        g.rounds += 1;
        g.wanted = false;
        g.more = false;
        g.suppressed = 0;
        let leader = g.leader;
        let members = g.members.clone();
        let timeout = g.timeout;
        let ids = g.ids.clone();
        let n = g.rounds;
        let id: Ident = format!("{}/execute#{n}", self.loops[leader].id).into();
        self.group().current = Some(RoundState::open(&id, Role::Execute, &ids, now, timeout));
        self.metrics.rounds_opened += 1;
        let label = self.loops[leader].ends[ri(Role::Execute)].label.clone();
        self.trace(
            TraceKind::RoundOpen,
            label.clone(),
            label,
            json!({"round": id, "activity": "execute", "group": ids, "deadline": now + timeout}),
        );
        self.sched.schedule(Event::RoundTimeout(id.clone()), now + timeout)?;
        for m in members {
            self.send(
                InteractionKind::Coordination,
                Payload::Solicit(id.clone()),
                Target::Component(leader, Role::Execute),
                Target::Component(m, Role::Execute),
            )?;
        }
        Ok(())
    }

    fn on_solicit(&mut self, l: usize, round: Ident) -> Result<(), EngineError> {
        self.loops[l].requested = false;
        let proposal = self.loops[l].pending.front().cloned();
        let leader = self.group().leader;
        self.send(
            InteractionKind::Coordination,
            Payload::Propose(round, proposal),
            Target::Component(l, Role::Execute),
            Target::Component(leader, Role::Execute),
        )
    }

    fn member_by_label(&self, label: &Ident) -> Option<usize> {
        self.loops.iter().position(|lp| &lp.ends[ri(Role::Execute)].label == label)
    }

    fn current_round(&mut self, round: &Ident) -> Option<&mut RoundState<AdaptationPlan>> {
        self.group().current.as_mut().filter(|r| &r.id == round)
    }

    fn on_propose(
        &mut self,
        leader: usize,
        from: Ident,
        round: Ident,
        p: Option<AdaptationPlan>,
    ) -> Result<(), EngineError> {
        let member = self.member_by_label(&from).map(|m| self.loops[m].id.clone()).expect("known member");
        let Some(state) = self.current_round(&round) else { return Ok(()) };
        let Some(decided) = state.on_proposal(&member, p)?.cloned() else { return Ok(()) };
        let label = self.loops[leader].ends[ri(Role::Execute)].label.clone();
        let (proposer, plan, actions) = match &decided.decided {
            Decision::NoOp => (None, None, 0),
            Decision::Chosen { proposer, proposal } => {
                (Some(proposer.clone()), Some(proposal.id.clone()), proposal.actions.len())
            }
        };
        let abstained: Vec<&Ident> = decided.proposals.iter().filter(|(_, p)| p.is_none()).map(|(m, _)| m).collect();
        self.trace(
            TraceKind::RoundDecide,
            label.clone(),
            label,
            json!({"round": round, "proposer": proposer, "plan": plan, "actions": actions, "abstained": abstained}),
        );
        let members = self.group().members.clone();
        for m in members {
            self.send(
                InteractionKind::Coordination,
                Payload::Decide(round.clone(), decided.decided.clone()),
                Target::Component(leader, Role::Execute),
                Target::Component(m, Role::Execute),
            )?;
        }
        Ok(())
    }

    fn on_decide(&mut self, l: usize, round: Ident, decision: Decision<AdaptationPlan>) -> Result<(), EngineError> {
        let mut suppressed = false;
        if let Decision::Chosen { proposer, proposal } = decision {
            let mut indices = Vec::new();
            let mut owned = Vec::new();
            for (i, a) in proposal.actions.iter().enumerate() {
                if self.loops[l].scope.contains(&a.service) {
                    indices.push(i);
                    owned.push(a.clone());
                }
            }
            if !owned.is_empty() {
                let sub = AdaptationPlan {
                    id: format!("{round}>{}", self.loops[l].id).into(),
                    symptom: proposal.symptom.clone(),
                    actions: owned,
                };
                self.roots.insert(sub.id.clone(), proposal.id.clone());
                self.dispatch(l, &sub, Some(&round), Some(&indices))?;
            }
            let lp = &mut self.loops[l];
            if lp.id == proposer {
                lp.pending.pop_front();
            } else if lp.pending.front().is_some_and(|p| p.actions == proposal.actions) {
                lp.pending.pop_front();
                suppressed = true;
                self.metrics.suppressed += 1;
            }
        }
        let more = !self.loops[l].pending.is_empty();
        let leader = self.group().leader;
        self.send(
            InteractionKind::Coordination,
            Payload::Ack { round, more, suppressed },
            Target::Component(l, Role::Execute),
            Target::Component(leader, Role::Execute),
        )
    }

    fn on_ack(&mut self, from: Ident, round: Ident, more: bool, suppressed: bool) -> Result<(), EngineError> {
        let member = self.member_by_label(&from).map(|m| self.loops[m].id.clone()).expect("known member");
        let Some(state) = self.current_round(&round) else { return Ok(()) };
        let complete = state.on_ack(&member);
        let opened_at = state.opened_at;
        let g = self.group();
        g.more |= more;
        g.suppressed += u64::from(suppressed);
        if !complete {
            return Ok(());
        }
        let (leader, suppressed_total, again) = (g.leader, g.suppressed, g.wanted || g.more);
        g.current = None;
        self.metrics.rounds_completed += 1;
        let label = self.loops[leader].ends[ri(Role::Execute)].label.clone();
        self.trace(
            TraceKind::RoundComplete,
            label.clone(),
            label,
            json!({"round": round, "suppressed": suppressed_total, "duration_ms": self.now - opened_at}),
        );
        if again {
            self.open_round()?;
        }
        Ok(())
    }

    fn on_round_timeout(&mut self, round: Ident) -> Result<(), EngineError> {
        if self.current_round(&round).is_none() {
            return Ok(());
        }
        let g = self.group();
        g.current = None;
        let (leader, again) = (g.leader, g.wanted || g.more);
        self.metrics.rounds_aborted += 1;
        let label = self.loops[leader].ends[ri(Role::Execute)].label.clone();
        self.trace(TraceKind::RoundAbort, label.clone(), label, json!({"round": round}));
        if again {
            self.open_round()?;
        }
        Ok(())
    }
}
