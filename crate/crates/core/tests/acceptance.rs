//! Acceptance checks, one line per criterion. Expected values come from
//! hand traces of the event schedule or from oracles that re-derive them
//! from the JSONL trace alone.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value as Json;

use fogloop::coordination::{combine, delegate, round_timeout, Combinator};
use fogloop::engine::{simulate, RunReport};
use fogloop::mape::{AdaptationPlan, PlannedAction, Symptom};
use fogloop::placement::{place, validate_placement, LoopSpec, Offering, Role};
use fogloop::scenario::{apply_variant, resolve, Scenario, Variant};
use fogloop::simnet::trace::{DigestSink, JsonlSink};
use fogloop::simnet::{Link, Node, Tier, Topology, TraceEvent, TraceHeader, TraceKind, TraceSink};
use fogloop::smartbuilding::{BuildingParams, Environment};
use fogloop::value::{Ident, Value};

const MINUTE: u64 = 60_000;
const TWO_HOURS: u64 = 120 * MINUTE;

// Tolerances.
const LATENCY_TOL_MS: u64 = 0;
const CRITERION1_BUDGET: Duration = Duration::from_secs(5);
const CRITERION3_BUDGET: Duration = Duration::from_secs(10);
const BANDWIDTH_FACTOR: u64 = 10;
const TEMP_RECONSTRUCTION_TOL: f64 = 1e-9;
const STRESS: u64 = 4;

type Outcome = Result<String, String>;
type Check = fn() -> Outcome;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn scenario_file(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name);
    Scenario::load(&path).unwrap_or_else(|e| panic!("{e}"))
}

fn one_office() -> Scenario {
    scenario_file("smart_building_1office.json")
}

fn centralized() -> Scenario {
    scenario_file("smart_building_3office_centralized.json")
}

fn decentralized() -> Scenario {
    scenario_file("smart_building_3office_decentralized.json")
}

fn bundled() -> Vec<(&'static str, Scenario)> {
    vec![("1office", one_office()), ("3office-centralized", centralized()), ("3office-decentralized", decentralized())]
}

fn variant(s: &Scenario, v: &str) -> Scenario {
    apply_variant(s, &v.parse::<Variant>().unwrap()).unwrap()
}

/// Same scenario with per-hop jitter, so different seeds give different runs.
fn jittered(s: &Scenario) -> Scenario {
    let mut s = s.clone();
    for l in &mut s.topology.links {
        l.jitter_ms = (l.latency_ms / 5).max(1).min(l.latency_ms);
    }
    s
}

fn sample_interval(s: &Scenario) -> u64 {
    let intervals: BTreeSet<u64> =
        s.domain.services().flat_map(|svc| svc.parameters.iter().map(|p| p.sample_interval_ms)).collect();
    assert_eq!(intervals.len(), 1, "bundled scenarios sample every parameter at one rate");
    *intervals.iter().next().unwrap()
}

fn params(s: &Scenario) -> BuildingParams {
    s.building.as_ref().unwrap().params.clone()
}

// ---------------------------------------------------------------------------
// Trace oracle: consumes the JSONL text of every event and re-derives counts,
// device state timelines, energy and temperature without engine internals.

#[derive(Clone, Debug)]
struct Effect {
    t: u64,
    service: String,
    root: Option<String>,
    round: Option<String>,
    action: Option<u64>,
}

#[derive(Default)]
struct Oracle {
    keep_sends: bool,
    horizon: u64,
    tiers: BTreeMap<String, String>,
    hops: BTreeMap<(String, String), u64>,
    sends: u64,
    timelines: BTreeMap<String, Vec<(u64, Option<String>, u64)>>,
    temp0: BTreeMap<String, f64>,
    env: Vec<(u64, String, f64)>,
    symptoms: Vec<(u64, String, u64)>,
    plans: Vec<(u64, String, String)>,
    effects: Vec<Effect>,
    dispatches: Vec<(Option<String>, String, u64)>,
    decides: Vec<(String, Option<String>, u64)>,
    finals: BTreeMap<String, Json>,
    rounds_completed: u64,
    rounds_aborted: u64,
}

fn text(v: &Json, key: &str) -> Option<String> {
    v.get(key).and_then(Json::as_str).map(str::to_string)
}

impl Oracle {
    fn new(keep_sends: bool) -> Self {
        Oracle { keep_sends, ..Default::default() }
    }

    fn feed(&mut self, e: &Json) {
        let t = e["t"].as_u64().unwrap();
        let d = &e["detail"];
        match e["kind"].as_str().unwrap() {
            "send" => {
                self.sends += 1;
                let path: Vec<&str> = d["path"].as_array().unwrap().iter().map(|n| n.as_str().unwrap()).collect();
                for w in path.windows(2) {
                    let key = (self.tiers[w[0]].clone(), self.tiers[w[1]].clone());
                    *self.hops.entry(key).or_default() += 1;
                }
            }
            "init" => {
                if let Some(service) = text(d, "service") {
                    let power = d["power_w"].as_u64().unwrap();
                    self.timelines.entry(service).or_default().push((t, text(d, "state"), power));
                } else {
                    self.temp0.insert(text(d, "office").unwrap(), d["temp_c"].as_f64().unwrap());
                }
            }
            "env" => self.env.push((t, text(d, "weather").unwrap(), d["outside_temp"].as_f64().unwrap())),
            "symptom" => self.symptoms.push((t, text(d, "policy").unwrap(), d["observed_at"].as_u64().unwrap())),
            "plan" => self.plans.push((t, text(d, "plan").unwrap(), text(d, "policy").unwrap())),
            "effect" => {
                let service = text(d, "service").unwrap();
                self.timelines.entry(service.clone()).or_default().push((
                    t,
                    text(d, "state"),
                    d["power_w"].as_u64().unwrap(),
                ));
                self.effects.push(Effect {
                    t,
                    service,
                    root: text(d, "root"),
                    round: text(d, "round"),
                    action: d.get("action").and_then(Json::as_u64),
                });
            }
            "dispatch" => {
                self.dispatches.push((text(d, "round"), text(d, "plan").unwrap(), d["action"].as_u64().unwrap()))
            }
            "round_decide" => {
                self.decides.push((text(d, "round").unwrap(), text(d, "plan"), d["actions"].as_u64().unwrap()))
            }
            "round_complete" => self.rounds_completed += 1,
            "round_abort" => self.rounds_aborted += 1,
            "final" => {
                self.finals.insert(text(d, "office").unwrap(), d.clone());
            }
            _ => {}
        }
    }

    fn fog_to_cloud(&self) -> u64 {
        self.hops.get(&("fog".into(), "cloud".into())).copied().unwrap_or(0)
    }

    fn state_at(&self, service: &str, t: u64) -> Option<String> {
        self.timelines[service].iter().take_while(|e| e.0 <= t).last().and_then(|e| e.1.clone())
    }

    fn weather_at(&self, t: u64) -> String {
        self.env.iter().take_while(|e| e.0 <= t).last().map_or("not_sunny".into(), |e| e.1.clone())
    }

    fn outside_at(&self, t: u64) -> f64 {
        self.env.iter().take_while(|e| e.0 <= t).last().map_or(Environment::default().outside_temp, |e| e.2)
    }

    fn offices(&self) -> Vec<String> {
        self.temp0.keys().cloned().collect()
    }

    /// Watt-milliseconds per office: power held between effects, times duration.
    fn energy(&self) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        for (service, tl) in &self.timelines {
            let office = service.split('.').next().unwrap().to_string();
            let mut wms = 0u64;
            for (i, &(t, _, w)) in tl.iter().enumerate() {
                let end = tl.get(i + 1).map_or(self.horizon, |n| n.0);
                wms += w * (end - t);
            }
            *out.entry(office).or_default() += wms;
        }
        out
    }

    /// Room temperature at every point where the model is advanced: ticks,
    /// effects in the office and environment changes.
    fn temperatures(&self, office: &str, tick: u64, p: &BuildingParams) -> Vec<(u64, f64)> {
        let mut points: BTreeSet<u64> = (0..=self.horizon).step_by(tick as usize).collect();
        let prefix = format!("{office}.");
        points.extend(self.effects.iter().filter(|e| e.service.starts_with(&prefix)).map(|e| e.t));
        points.extend(self.env.iter().map(|e| e.0));
        points.insert(self.horizon);
        let heater = format!("{office}.heater");
        let window = format!("{office}.window");
        let mut temp = self.temp0[office];
        let mut out = vec![(0, temp)];
        let mut prev = 0;
        for &t in points.iter().filter(|&&t| t > 0) {
            let heat =
                if self.state_at(&heater, prev).as_deref() == Some("on") { p.heater_rate_c_per_min } else { 0.0 };
            let k = if self.state_at(&window, prev).as_deref() == Some("open") {
                p.leak_open_per_min
            } else {
                p.leak_closed_per_min
            };
            let minutes = (t - prev) as f64 / 60_000.0;
            temp += (heat + k * (self.outside_at(prev) - temp)) * minutes;
            out.push((t, temp));
            prev = t;
        }
        out
    }

    /// Maximal intervals where sunny, window open and lamp on all hold.
    fn p1_intervals(&self, office: &str) -> Vec<(u64, u64)> {
        let (window, lamp) = (format!("{office}.window"), format!("{office}.lamp"));
        let mut points: BTreeSet<u64> = self.env.iter().map(|e| e.0).collect();
        points.extend(self.timelines[&window].iter().map(|e| e.0));
        points.extend(self.timelines[&lamp].iter().map(|e| e.0));
        let mut out = Vec::new();
        let mut start = None;
        for &t in &points {
            let holds = self.weather_at(t) == "sunny"
                && self.state_at(&window, t).as_deref() == Some("open")
                && self.state_at(&lamp, t).as_deref() == Some("on");
            match (holds, start) {
                (true, None) => start = Some(t),
                (false, Some(s)) => {
                    out.push((s, t));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            out.push((s, self.horizon));
        }
        out
    }

    /// Decision latency per plan of `policy`: first effect of the plan minus
    /// the observation time its symptom reported.
    fn latencies(&self, policy: &str) -> Vec<u64> {
        let observed: Vec<u64> = self.symptoms.iter().filter(|s| s.1 == policy).map(|s| s.2).collect();
        let plans: Vec<&String> = self.plans.iter().filter(|p| p.2 == policy).map(|p| &p.1).collect();
        assert_eq!(observed.len(), plans.len(), "one plan per symptom");
        plans
            .iter()
            .zip(observed)
            .filter_map(|(plan, obs)| {
                self.effects.iter().find(|e| e.root.as_deref() == Some(plan.as_str())).map(|e| e.t - obs)
            })
            .collect()
    }
}

impl TraceSink for Oracle {
    fn header(&mut self, header: &TraceHeader) {
        let v: Json = serde_json::from_str(&serde_json::to_string(header).unwrap()).unwrap();
        self.horizon = v["horizon_ms"].as_u64().unwrap();
        for (id, tier) in v["nodes"].as_object().unwrap() {
            self.tiers.insert(id.clone(), tier.as_str().unwrap().to_string());
        }
    }

    fn record(&mut self, event: TraceEvent) {
        match event.kind {
            TraceKind::Deliver => return,
            TraceKind::Send if !self.keep_sends => return,
            _ => {}
        }
        let line = serde_json::to_string(&event).unwrap();
        self.feed(&serde_json::from_str(&line).unwrap());
    }
}

fn run(s: &Scenario, seed: u64, horizon: u64, keep_sends: bool) -> (RunReport, Oracle, Duration) {
    let mut oracle = Oracle::new(keep_sends);
    let started = Instant::now();
    let report = simulate(s, seed, horizon, &mut oracle).unwrap();
    (report, oracle, started.elapsed())
}

// ---------------------------------------------------------------------------

#[allow(clippy::absurd_extreme_comparisons)]
/// P1 decision latency on the 1-office scenario: 1 ms device to fog plus
/// 1 ms fog to device with the loop on the fog node; 1 + 50 up to the
/// cloud's analyze/plan and 50 + 1 back down when split.
fn criterion1() -> Outcome {
    let policy = "office1/lights-off-sunny";
    let mut parts = Vec::new();
    for (name, s, expected) in
        [("mapeaas", one_office(), 2u64), ("apaas_split", variant(&one_office(), "apaas_split"), 102)]
    {
        let (report, oracle, took) = run(&s, 42, TWO_HOURS, false);
        let traced = oracle.latencies(policy);
        let reported = report.metrics.latencies(Some(policy));
        ensure!(!traced.is_empty(), "{name}: no P1 decision in the run");
        ensure!(traced == reported, "{name}: trace says {traced:?}, metrics say {reported:?}");
        ensure!(
            traced.iter().all(|&l| l.abs_diff(expected) <= LATENCY_TOL_MS),
            "{name}: P1 latencies {traced:?}, expected {expected} ms"
        );
        ensure!(took < CRITERION1_BUDGET, "{name}: run took {took:?}");
        parts.push(format!("{name} {expected} ms x{} in {:.2}s", traced.len(), took.as_secs_f64()));
    }
    Ok(parts.join(", "))
}

fn criterion2() -> Outcome {
    let horizon = 30 * MINUTE;
    let fog = centralized();
    let resolved = resolve(&fog).unwrap();
    let master_node = resolved.placement.node_of("building", Role::Execute).unwrap();
    ensure!(fog.topology.tier(master_node) == Some(Tier::Fog), "master placed on {master_node}, not a fog node");
    let (fog_report, fog_tally, _) = run(&fog, 5, horizon, true);
    let (cloud_report, cloud_tally, _) = run(&variant(&fog, "apaas_split"), 5, horizon, true);
    for (name, report, tally) in [("fog master", &fog_report, &fog_tally), ("apaas_split", &cloud_report, &cloud_tally)]
    {
        ensure!(
            tally.fog_to_cloud() == report.metrics.fog_to_cloud(),
            "{name}: tally {} vs metrics {}",
            tally.fog_to_cloud(),
            report.metrics.fog_to_cloud()
        );
        ensure!(
            tally.sends == report.metrics.messages,
            "{name}: {} sends vs {} messages",
            tally.sends,
            report.metrics.messages
        );
    }
    let (a, b) = (fog_tally.fog_to_cloud(), cloud_tally.fog_to_cloud());
    ensure!(b > 0 && a * BANDWIDTH_FACTOR <= b, "fog->cloud {a} with fog master vs {b} all-split");
    Ok(format!("fog->cloud {a} (master on {master_node}) vs {b} (apaas_split) over 30 min"))
}

/// Largest |dT/dt| in °C/min anywhere within the band, any heater/window combination.
fn max_rate(p: &BuildingParams, outside: f64) -> f64 {
    let mut m: f64 = 0.0;
    for temp in [p.setpoint_c - 1.0, p.setpoint_c + 1.0] {
        for heat in [0.0, p.heater_rate_c_per_min] {
            for k in [p.leak_open_per_min, p.leak_closed_per_min] {
                m = m.max((heat + k * (outside - temp)).abs());
            }
        }
    }
    m
}

fn check_rules(label: &str, s: &Scenario, coordination_ms: u64) -> Outcome {
    let p = params(s);
    let sample = sample_interval(s);
    // Device to fog and back, plus the coordination exchange for peer loops.
    let round_trip = 2 + coordination_ms;
    let slack = sample + round_trip;
    let (report, oracle, took) = run(s, 0, TWO_HOURS, false);
    ensure!(took < CRITERION3_BUDGET, "{label}: run took {took:?}");

    let mut p1_fired = 0;
    let mut p2_checked = 0;
    let mut band = (f64::INFINITY, f64::NEG_INFINITY);
    for office in oracle.offices() {
        let lamp = format!("{office}.lamp");
        for (a, b) in oracle.p1_intervals(&office) {
            ensure!(b - a <= slack, "{label}: {office} P1 condition held {a}..{b}");
            if oracle.state_at(&lamp, b).as_deref() == Some("off") {
                p1_fired += 1;
            }
        }

        let door = format!("{office}.door");
        let locks: Vec<u64> =
            oracle.timelines[&door].iter().skip(1).filter(|e| e.1.as_deref() == Some("locked")).map(|e| e.0).collect();
        for t in locks {
            let by = t + p.clock_duration_ms + slack;
            let unlocked =
                oracle.timelines[&door].iter().any(|e| e.0 > t && e.0 <= by && e.1.as_deref() == Some("unlocked"));
            if by > oracle.horizon || unlocked {
                continue;
            }
            ensure!(
                oracle.state_at(&lamp, by).as_deref() == Some("off"),
                "{label}: {office} lamp on at {by} after lock at {t}"
            );
            if oracle.state_at(&lamp, t + p.clock_duration_ms - 1).as_deref() == Some("on") {
                p2_checked += 1;
            }
        }

        // The band is reachable only while it is colder outside than the band.
        let temps = oracle.temperatures(&office, sample, &p);
        let final_temp = oracle.finals[&office]["temp_c"].as_f64().unwrap();
        let last = temps.last().unwrap().1;
        ensure!(
            (last - final_temp).abs() <= TEMP_RECONSTRUCTION_TOL,
            "{label}: {office} reconstructed {last} vs final {final_temp}"
        );
        let (lo, hi) = (p.setpoint_c - 1.0, p.setpoint_c + 1.0);
        let Some(settled) = temps.iter().position(|&(_, c)| (lo..=hi).contains(&c)) else {
            return Err(format!("{label}: {office} never reached the band"));
        };
        for &(t, c) in &temps[settled..] {
            let outside = oracle.outside_at(t);
            if outside >= lo {
                break;
            }
            let delta = max_rate(&p, outside) * slack as f64 / 60_000.0;
            ensure!(c >= lo - delta && c <= hi + delta, "{label}: {office} at {t} ms is {c} °C, band ±{delta}");
            band = (band.0.min(c), band.1.max(c));
        }
    }
    ensure!(p1_fired > 0, "{label}: P1 never switched a lamp off");
    ensure!(p2_checked > 0, "{label}: no lock left a lamp on for P2 to handle");
    ensure!(!report.metrics.decisions.is_empty(), "{label}: no decisions");
    Ok(format!(
        "{label}: P1 x{p1_fired}, P2 x{p2_checked}, temp {:.3}..{:.3} °C in {:.2}s",
        band.0,
        band.1,
        took.as_secs_f64()
    ))
}

fn criterion3() -> Outcome {
    let d = decentralized();
    let resolved = resolve(&d).unwrap();
    let routes = fogloop::simnet::RouteTable::new(&d.topology);
    let exec: Vec<&Ident> = d.loops.iter().filter_map(|l| resolved.placement.node_of(&l.id, Role::Execute)).collect();
    let max_lat = exec.iter().flat_map(|a| exec.iter().map(|b| routes.latency(a, b).unwrap())).max().unwrap();
    // Waiting out a round in progress, then one full round.
    let coordination = 2 * round_timeout(max_lat);
    let parts = [
        check_rules("1office", &one_office(), 0)?,
        check_rules("centralized", &centralized(), 0)?,
        check_rules("decentralized", &d, coordination)?,
    ];
    Ok(parts.join("; "))
}

fn criterion4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let seeds: Vec<u64> = (0..20).map(|_| rng.gen()).collect();
    let mut runs = 0;
    for (name, s) in bundled() {
        let s = jittered(&s);
        for &seed in &seeds {
            let (report, oracle, _) = run(&s, seed, 15 * MINUTE, false);
            let energy = oracle.energy();
            for office in &report.offices {
                let expected = energy[&*office.office];
                let traced = oracle.finals[&*office.office]["watt_ms"].as_u64().unwrap();
                ensure!(
                    office.watt_ms == expected && traced == expected,
                    "{name} seed {seed} {}: meter {} / final {traced} vs oracle {expected}",
                    office.office,
                    office.watt_ms
                );
                ensure!(office.kwh == expected as f64 / 3_600_000_000.0, "{name} seed {seed}: kWh conversion");
            }
            runs += 1;
        }
    }
    Ok(format!("{runs} runs, every office meter equals the power x time oracle"))
}

fn criterion5() -> Outcome {
    let digest = |s: &Scenario, seed| {
        let mut d = DigestSink::new();
        simulate(s, seed, 10 * MINUTE, &mut d).unwrap();
        d.hex_digest()
    };
    let mut distinct = BTreeSet::new();
    for (name, s) in bundled() {
        let s = jittered(&s);
        for seed in 0..5 {
            let (a, b) = (digest(&s, seed), digest(&s, seed));
            ensure!(a == b, "{name} seed {seed}: digests differ");
            distinct.insert(a);
        }
    }
    ensure!(distinct.len() == 15, "only {} distinct traces over 15 runs", distinct.len());
    let bytes = |seed| {
        let mut sink = JsonlSink::new(Vec::new());
        simulate(&jittered(&one_office()), seed, 2 * MINUTE, &mut sink).unwrap();
        sink.finish().unwrap()
    };
    ensure!(bytes(9) == bytes(9), "JSONL bytes differ");
    Ok("15 (scenario, seed) pairs reproduce byte-identical traces".into())
}

fn criterion6() -> Outcome {
    let mut rounds = 0;
    let mut actions = 0;
    let cases: Vec<(Scenario, u64, u64)> = std::iter::once((decentralized(), 0, TWO_HOURS))
        .chain((1..=4).map(|seed| (jittered(&decentralized()), seed, 30 * MINUTE)))
        .chain(std::iter::once((variant(&decentralized(), "apaas_split"), 0, 30 * MINUTE)))
        .collect();
    for (s, seed, horizon) in cases {
        let (_, oracle, _) = run(&s, seed, horizon, false);
        ensure!(oracle.rounds_aborted == 0, "seed {seed}: {} rounds aborted", oracle.rounds_aborted);
        let mut seen = BTreeMap::new();
        for (round, _, action) in &oracle.dispatches {
            let round = round.clone().ok_or("dispatch outside a round in a decentralized run")?;
            *seen.entry((round, *action)).or_insert(0) += 1;
        }
        ensure!(seen.values().all(|&n| n == 1), "seed {seed}: some (round, action) dispatched twice");
        for (round, plan, n) in &oracle.decides {
            if plan.is_none() {
                continue;
            }
            rounds += 1;
            for i in 0..*n {
                ensure!(seen.contains_key(&(round.clone(), i)), "seed {seed}: {round} action {i} never dispatched");
                let effects =
                    oracle.effects.iter().filter(|e| e.round.as_ref() == Some(round) && e.action == Some(i)).count();
                ensure!(effects <= 1, "seed {seed}: {round} action {i} took effect {effects} times");
                actions += 1;
            }
        }
        ensure!(
            seen.len() as u64 == oracle.decides.iter().map(|d| d.2).sum::<u64>(),
            "seed {seed}: dispatches outside decided rounds"
        );
    }
    ensure!(rounds > 0, "no decided rounds");
    Ok(format!("{rounds} decided rounds, {actions} actions, each dispatched exactly once"))
}

fn criterion7() -> Outcome {
    let mut checked = BTreeSet::new();
    for (seed, jitter) in std::iter::once((0, false)).chain((1..=STRESS).map(|s| (s, true))) {
        let prep = |s: Scenario| if jitter { jittered(&s) } else { s };
        let (c, co, _) = run(&prep(centralized()), seed, TWO_HOURS, false);
        let (d, dor, _) = run(&prep(decentralized()), seed, TWO_HOURS, false);
        ensure!(c.snapshot == d.snapshot, "seed {seed}: snapshots differ\n{:?}\n{:?}", c.snapshot, d.snapshot);
        for office in co.offices() {
            ensure!(
                co.finals[&office]["devices"] == dor.finals[&office]["devices"],
                "seed {seed}: traced final states differ"
            );
        }
        checked.insert(c.snapshot_digest()[..12].to_string());
    }
    Ok(format!(
        "identical end states for seeds 0-{STRESS} (snapshot {})",
        checked.into_iter().collect::<Vec<_>>().join("/")
    ))
}

fn arb_topology() -> impl Strategy<Value = (Topology, Vec<LoopSpec>)> {
    (1usize..=6, 1usize..=13, any::<u64>())
        .prop_flat_map(|(fogs, devices, bits)| {
            (
                Just((fogs, devices, bits)),
                proptest::collection::vec(1u64..=30, fogs * (devices + fogs + 1)),
                proptest::collection::vec(any::<bool>(), devices),
                1usize..=3,
            )
        })
        .prop_map(|((fogs, devices, bits), lat, offerings, per_loop)| {
            let mut lat = lat.into_iter();
            let fog = |f: usize| format!("f{f}");
            let mut topo =
                Topology { nodes: vec![Node { id: "cloud".into(), tier: Tier::Cloud, hosts: vec![] }], links: vec![] };
            for f in 0..fogs {
                topo.nodes.push(Node { id: fog(f), tier: Tier::Fog, hosts: vec![] });
                topo.links.push(Link {
                    a: fog(f),
                    b: "cloud".into(),
                    latency_ms: 30 + lat.next().unwrap(),
                    jitter_ms: 0,
                });
                for g in 0..f {
                    let l = lat.next().unwrap();
                    if l % 2 == 0 {
                        topo.links.push(Link { a: fog(g), b: fog(f), latency_ms: l, jitter_ms: 0 });
                    }
                }
            }
            let mut loops: Vec<LoopSpec> = Vec::new();
            for (d, &split) in offerings.iter().enumerate().take(devices) {
                let (node, service) = (format!("d{d}"), format!("s{d}"));
                topo.nodes.push(Node { id: node.clone(), tier: Tier::Device, hosts: vec![service.clone()] });
                let home = (bits as usize).wrapping_add(d * 7) % fogs;
                for f in 0..fogs {
                    let l = lat.next().unwrap();
                    if f == home || l % 5 == 0 {
                        topo.links.push(Link { a: node.clone(), b: fog(f), latency_ms: l, jitter_ms: 0 });
                    }
                }
                if d % per_loop == 0 {
                    let offering = if split { Offering::ApaasSplit } else { Offering::Mapeaas };
                    loops.push(LoopSpec::new(&format!("l{d}"), &[], offering, &[]));
                }
                loops.last_mut().unwrap().scope.push(service.into());
            }
            (topo, loops)
        })
}

fn criterion8() -> Outcome {
    let mut runner = TestRunner::new(Config { cases: 1000, failure_persistence: None, ..Config::default() });
    let flagged = std::cell::Cell::new(0u32);
    let strategy = (arb_topology(), any::<usize>(), any::<bool>());
    runner
        .run(&strategy, |((topo, loops), pick, exec)| {
            prop_assert!(topo.nodes.len() <= 20);
            prop_assert!(fogloop::simnet::validate_topology(&topo).is_empty());
            let p = place(&loops, &topo).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let report = validate_placement(&p, &loops, &topo);
            prop_assert!(report.is_empty(), "{}", report);
            let split: Vec<&LoopSpec> = loops.iter().filter(|l| l.offering == Offering::ApaasSplit).collect();
            if let Some(spec) = split.get(pick % split.len().max(1)) {
                let role = if exec { Role::Execute } else { Role::Monitor };
                let mut bad = p.clone();
                bad.assign(&spec.id, role, "cloud");
                let report = validate_placement(&bad, &loops, &topo);
                prop_assert_eq!(report.len(), 1);
                let v = report.iter().next().unwrap();
                prop_assert!(v.message.contains("must remain at fog"), "{}", v);
                flagged.set(flagged.get() + 1);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    let flagged = flagged.get();
    ensure!(flagged > 0, "no APaaS-split loop was ever generated");
    Ok(format!("1000 topologies (<= 20 nodes) placed validly, {flagged} cloud moves flagged"))
}

fn criterion9() -> Outcome {
    let mut runner = TestRunner::new(Config { cases: 1000, failure_persistence: None, ..Config::default() });
    let plans = (1usize..=4).prop_flat_map(|slaves| {
        (Just(slaves), proptest::collection::vec((0..slaves, 0usize..5, any::<bool>()), 0..=50))
    });
    runner
        .run(&plans, |(slaves, picks)| {
            let scopes: Vec<(Ident, BTreeSet<Ident>)> = (0..slaves)
                .map(|s| (Ident::from(format!("loop{s}")), (0..5).map(|d| Ident::from(format!("o{s}.d{d}"))).collect()))
                .collect();
            let actions: Vec<PlannedAction> = picks
                .iter()
                .map(|&(s, d, on)| PlannedAction::new(&format!("o{s}.d{d}"), "set_power", Some(Value::Bool(on))))
                .collect();
            let symptom = Symptom { policy: "p".into(), snapshot: vec![], raised_at: 0 };
            let plan = AdaptationPlan { id: "m#1".into(), symptom, actions: actions.clone() };
            let subs = delegate(&plan, &scopes).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let mut union: Vec<PlannedAction> = subs.iter().flat_map(|s| s.plan.actions.clone()).collect();
            let mut want = actions.clone();
            let key = |a: &PlannedAction| format!("{}|{:?}", a.service, a.arg);
            union.sort_by_key(key);
            want.sort_by_key(key);
            prop_assert_eq!(union, want);
            for sub in &subs {
                let scope = &scopes.iter().find(|(id, _)| *id == sub.slave).unwrap().1;
                prop_assert!(sub.plan.actions.iter().all(|a| scope.contains(&a.service)));
                let in_order: Vec<&PlannedAction> = actions.iter().filter(|a| scope.contains(&a.service)).collect();
                prop_assert_eq!(sub.plan.actions.iter().collect::<Vec<_>>(), in_order);
            }
            Ok(())
        })
        .map_err(|e| format!("delegation: {e}"))?;

    let mut runner = TestRunner::new(Config { cases: 1000, failure_persistence: None, ..Config::default() });
    let value = prop_oneof![
        (-1_000_000i64..1_000_000).prop_map(Value::Int),
        (-1.0e6f64..1.0e6).prop_map(Value::Real),
        any::<f64>().prop_filter("finite", |f| f.is_finite()).prop_map(Value::Real),
    ];
    let inputs = proptest::collection::vec(value, 1..=100).prop_flat_map(|v| (Just(v.clone()), Just(v).prop_shuffle()));
    runner
        .run(&inputs, |(values, shuffled)| {
            for c in [Combinator::Sum, Combinator::Mean, Combinator::Max, Combinator::Min] {
                let a = combine("agg", c, &values, None);
                let b = combine("agg", c, &shuffled, None);
                prop_assert_eq!(a, b, "{:?}", c);
            }
            Ok(())
        })
        .map_err(|e| format!("aggregation: {e}"))?;
    Ok("1000 plans conserved by delegation, 1000 input vectors permutation-invariant".into())
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, Check); 9] = [
        (1, "fog vs cloud decision latency", criterion1),
        (2, "bandwidth relief", criterion2),
        (3, "rule correctness", criterion3),
        (4, "energy conservation", criterion4),
        (5, "determinism", criterion5),
        (6, "exactly-once execution", criterion6),
        (7, "mode equivalence", criterion7),
        (8, "placement safety", criterion8),
        (9, "delegation and aggregation properties", criterion9),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str()) || *f == n.to_string()) {
            continue;
        }
        let started = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panic: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} PASS {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} FAIL {name} ({secs:.1}s): {why}");
            }
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
