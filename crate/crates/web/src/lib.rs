//! Browser bindings. Every export takes and returns JSON text; the plain
//! Rust functions behind them are what the native tests exercise.

use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use fogloop::engine::simulate;
use fogloop::scenario::{apply_variant, bundled, validate, Scenario, Variant};
use fogloop::simnet::trace::{Detail, DigestSink, Tee};
use fogloop::simnet::{TraceEvent, TraceHeader, TraceKind, TraceSink};

/// Longest run the page will start, to keep the tab responsive.
pub const MAX_HORIZON_MS: u64 = 4 * 60 * 60_000;

const MAX_LOG: usize = 400;

#[derive(Serialize)]
struct Violation {
    path: String,
    message: String,
}

#[derive(Serialize)]
struct LatencyPoint {
    t: u64,
    policy: String,
    latency_ms: u64,
}

#[derive(Serialize)]
struct LogLine {
    t: u64,
    kind: TraceKind,
    text: String,
}

/// Keeps what the page plots: office power steps, decision latencies and a
/// short log of decisions and effects.
#[derive(Default)]
struct Collector {
    power: BTreeMap<String, u64>,
    series: BTreeMap<String, Vec<(u64, u64)>>,
    policies: BTreeMap<String, String>,
    latencies: Vec<LatencyPoint>,
    log: Vec<LogLine>,
    dropped: u64,
}

fn office_of(service: &str) -> &str {
    service.split('.').next().unwrap_or(service)
}

impl Collector {
    fn set_power(&mut self, t: u64, service: &str, watts: u64) {
        self.power.insert(service.to_string(), watts);
        let office = office_of(service);
        let total: u64 = self.power.iter().filter(|(s, _)| office_of(s) == office).map(|(_, w)| w).sum();
        let series = self.series.entry(office.to_string()).or_default();
        match series.last_mut() {
            Some(last) if last.0 == t => last.1 = total,
            Some(last) if last.1 == total => {}
            _ => series.push((t, total)),
        }
    }

    fn note(&mut self, t: u64, kind: TraceKind, text: String) {
        if self.log.len() < MAX_LOG {
            self.log.push(LogLine { t, kind, text });
        } else {
            self.dropped += 1;
        }
    }
}

impl TraceSink for Collector {
    fn header(&mut self, _: &TraceHeader) {}

    fn record(&mut self, e: TraceEvent) {
        let Detail::Json(d) = &e.detail else { return };
        let s = |k: &str| d.get(k).and_then(Value::as_str).unwrap_or_default().to_string();
        match e.kind {
            TraceKind::Init | TraceKind::Effect => {
                if let (Some(svc), Some(w)) = (d.get("service").and_then(Value::as_str), d["power_w"].as_u64()) {
                    self.set_power(e.t, svc, w);
                }
                if e.kind == TraceKind::Effect {
                    if let Some(lat) = d.get("latency_ms").and_then(Value::as_u64) {
                        let policy = self.policies.get(&s("root")).cloned().unwrap_or_default();
                        self.latencies.push(LatencyPoint { t: e.t, policy, latency_ms: lat });
                    }
                    if d["changed"].as_bool() == Some(true) {
                        self.note(e.t, e.kind, format!("{} {} -> {}", s("source"), s("service"), s("state")));
                    }
                }
            }
            TraceKind::Plan => {
                self.policies.insert(s("plan"), s("policy"));
                self.note(e.t, e.kind, format!("{} for {}", s("plan"), s("policy")));
            }
            TraceKind::Env => self.note(e.t, e.kind, d.to_string()),
            TraceKind::RoundAbort => self.note(e.t, e.kind, s("round")),
            _ => {}
        }
    }
}

fn parse(text: &str) -> Result<Scenario, String> {
    Scenario::from_json(text).map_err(|e| format!("scenario is not valid JSON: {e}"))
}

fn with_variant(s: Scenario, variant: &str) -> Result<Scenario, String> {
    if variant.trim().is_empty() {
        return Ok(s);
    }
    let v: Variant = variant.parse().map_err(|e| format!("{e}"))?;
    apply_variant(&s, &v).map_err(|e| e.to_string())
}

fn checked(s: &Scenario, horizon_ms: u64) -> Result<(), String> {
    if horizon_ms == 0 || horizon_ms > MAX_HORIZON_MS {
        return Err(format!("horizon must be between 1 and {MAX_HORIZON_MS} ms"));
    }
    let report = validate(s);
    if report.is_empty() {
        Ok(())
    } else {
        Err(report.to_string())
    }
}

/// Names of the scenarios shipped with the library.
pub fn scenario_names() -> Vec<&'static str> {
    bundled().into_iter().map(|(name, _)| name).collect()
}

pub fn scenario_text(name: &str) -> Result<String, String> {
    bundled()
        .into_iter()
        .find(|(n, _)| *n == name)
        .map(|(_, s)| s.to_pretty_json())
        .ok_or_else(|| format!("no bundled scenario named {name}"))
}

/// Violations of a scenario, empty when it is valid.
pub fn check(text: &str) -> Result<String, String> {
    let s = parse(text)?;
    let violations: Vec<Violation> =
        validate(&s).iter().map(|v| Violation { path: v.path.clone(), message: v.message.clone() }).collect();
    Ok(serde_json::to_string(&violations).unwrap())
}

pub fn run(text: &str, variant: &str, seed: u64, horizon_ms: u64) -> Result<String, String> {
    let s = with_variant(parse(text)?, variant)?;
    checked(&s, horizon_ms)?;
    let mut c = Collector::default();
    let mut digest = DigestSink::new();
    let report = simulate(&s, seed, horizon_ms, &mut Tee(&mut c, &mut digest)).map_err(|e| e.to_string())?;
    for series in c.series.values_mut() {
        let last = series.last().map_or(0, |p| p.1);
        series.push((horizon_ms, last));
    }
    let m = &report.metrics;
    Ok(json!({
        "scenario": s.name,
        "seed": seed,
        "horizon_ms": horizon_ms,
        "summary": m.summary(),
        "decisions": m.decisions.len(),
        "mean_latency_ms": m.mean_latency(None),
        "max_latency_ms": m.max_latency(None),
        "messages": m.messages,
        "fog_to_cloud": m.fog_to_cloud(),
        "total_kwh": m.total_kwh(),
        "offices": report.offices.iter().map(|o| json!({"office": o.office, "kwh": o.kwh, "temp_c": o.temp_c})).collect::<Vec<_>>(),
        "power": c.series,
        "latencies": c.latencies,
        "log": c.log,
        "log_dropped": c.dropped,
        "final_state": report.snapshot,
        "final_state_digest": report.snapshot_digest(),
        "trace_digest": digest.hex_digest(),
    })
    .to_string())
}

/// One row per comma-separated variant.
pub fn compare_variants(text: &str, variants: &str, seed: u64, horizon_ms: u64) -> Result<String, String> {
    let base = parse(text)?;
    let mut rows = Vec::new();
    for v in variants.split(',').map(str::trim).filter(|v| !v.is_empty()) {
        let s = with_variant(base.clone(), v)?;
        checked(&s, horizon_ms).map_err(|e| format!("{v}: {e}"))?;
        let mut digest = DigestSink::new();
        let report = simulate(&s, seed, horizon_ms, &mut digest).map_err(|e| e.to_string())?;
        let m = &report.metrics;
        rows.push(json!({
            "variant": v,
            "decisions": m.decisions.len(),
            "mean_latency_ms": m.mean_latency(None),
            "max_latency_ms": m.max_latency(None),
            "fog_to_cloud": m.fog_to_cloud(),
            "messages": m.messages,
            "total_kwh": m.total_kwh(),
            "final_state_digest": report.snapshot_digest(),
            "trace_digest": digest.hex_digest(),
        }));
    }
    if rows.is_empty() {
        return Err("no variants given".into());
    }
    Ok(Value::Array(rows).to_string())
}

fn js(r: Result<String, String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = scenarioNames)]
pub fn scenario_names_js() -> String {
    serde_json::to_string(&scenario_names()).unwrap()
}

#[wasm_bindgen(js_name = scenarioText)]
pub fn scenario_text_js(name: &str) -> Result<String, JsError> {
    js(scenario_text(name))
}

#[wasm_bindgen(js_name = validateScenario)]
pub fn validate_js(text: &str) -> Result<String, JsError> {
    js(check(text))
}

#[wasm_bindgen(js_name = runScenario)]
pub fn run_js(text: &str, variant: &str, seed: u64, horizon_ms: u64) -> Result<String, JsError> {
    js(run(text, variant, seed, horizon_ms))
}

#[wasm_bindgen(js_name = compareVariants)]
pub fn compare_js(text: &str, variants: &str, seed: u64, horizon_ms: u64) -> Result<String, JsError> {
    js(compare_variants(text, variants, seed, horizon_ms))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_office() -> String {
        scenario_text("smart_building_1office.json").unwrap()
    }

    #[test]
    fn lists_bundled_scenarios() {
        assert_eq!(scenario_names().len(), 3);
        assert!(scenario_text("nope.json").is_err());
    }

    #[test]
    fn power_series_ends_at_horizon_and_latencies_match() {
        let out: Value = serde_json::from_str(&run(&one_office(), "", 1, 30 * 60_000).unwrap()).unwrap();
        let series = out["power"]["office1"].as_array().unwrap();
        assert_eq!(series.last().unwrap()[0], 30 * 60_000);
        assert_eq!(series[0][0], 0);
        let lat = out["latencies"].as_array().unwrap();
        assert_eq!(lat.len() as u64, out["decisions"].as_u64().unwrap());
        assert!(lat.iter().any(|p| p["policy"] == "office1/lights-off-sunny" && p["latency_ms"] == 2));
    }

    #[test]
    fn run_is_deterministic() {
        let a = run(&one_office(), "apaas_split", 4, 10 * 60_000).unwrap();
        assert_eq!(a, run(&one_office(), "apaas_split", 4, 10 * 60_000).unwrap());
    }

    #[test]
    fn compare_rows_follow_variants() {
        let text = scenario_text("smart_building_3office_centralized.json").unwrap();
        let rows: Value =
            serde_json::from_str(&compare_variants(&text, "centralized, decentralized", 0, 5 * 60_000).unwrap())
                .unwrap();
        let rows = rows.as_array().unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1]["variant"], "decentralized");
        assert!(compare_variants(&text, "warp", 0, 1000).is_err());
    }

    #[test]
    fn validation_lists_violations() {
        assert_eq!(check(&one_office()).unwrap(), "[]");
        let mut s: Value = serde_json::from_str(&one_office()).unwrap();
        s["loops"][0]["offering"] = json!("apaas_split");
        s["loops"][0]["components"]["execute"] = json!("cloud");
        let out: Vec<Value> = serde_json::from_str(&check(&s.to_string()).unwrap()).unwrap();
        assert!(out.iter().any(|v| v["message"].as_str().unwrap().contains("must remain at fog")), "{out:?}");
        assert!(check("{").is_err());
        assert!(run(&one_office(), "", 0, 0).is_err());
    }
}
