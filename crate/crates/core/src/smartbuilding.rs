//! Smart-building case study: six devices per office, room thermal model,
//! energy metering and a scenario generator for N offices.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordination::{AggregationInput, AggregationSpec, Combinator, StreamRef};
use crate::mape::{Comparator, Condition, Observation, PlannedAction, Policy};
use crate::model::{CommandSpec, Composite, Domain, ParameterSpec, Service, ServiceKind, Task};
use crate::placement::{LoopSpec, Offering, Role};
use crate::scenario::{ControlConfig, MasterConfig, Scenario};
use crate::simnet::{Node, Tier, Topology};
use crate::value::{Ident, Millis, Value, ValueType};

/// Watt-milliseconds per kilowatt-hour.
pub const WATT_MS_PER_KWH: u64 = 3_600_000_000;
pub const MASTER_LOOP: &str = "building";
pub const BUILDING_STATE: &str = "building.state";
pub const TOTAL_KWH: &str = "total_kwh";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    Door,
    Window,
    Heater,
    Meter,
    Lamp,
    Clock,
}

impl DeviceKind {
    pub const ALL: [DeviceKind; 6] = [
        DeviceKind::Door,
        DeviceKind::Window,
        DeviceKind::Heater,
        DeviceKind::Meter,
        DeviceKind::Lamp,
        DeviceKind::Clock,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DeviceKind::Door => "door",
            DeviceKind::Window => "window",
            DeviceKind::Heater => "heater",
            DeviceKind::Meter => "meter",
            DeviceKind::Lamp => "lamp",
            DeviceKind::Clock => "clock",
        }
    }

    pub fn service_name(self, office: &str) -> String {
        format!("{office}.{}", self.as_str())
    }
}

impl fmt::Display for DeviceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weather {
    Sunny,
    NotSunny,
}

impl Weather {
    pub fn as_str(self) -> &'static str {
        match self {
            Weather::Sunny => "sunny",
            Weather::NotSunny => "not_sunny",
        }
    }
}

/// Physical constants of the building model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BuildingParams {
    pub setpoint_c: f64,
    pub lamp_w: u64,
    pub heater_w: u64,
    /// Heating rate of a running heater, °C per minute.
    pub heater_rate_c_per_min: f64,
    /// Fraction of the outside/inside difference exchanged per minute.
    pub leak_open_per_min: f64,
    pub leak_closed_per_min: f64,
    pub clock_duration_ms: Millis,
}

impl Default for BuildingParams {
    fn default() -> Self {
        BuildingParams {
            setpoint_c: 21.0,
            lamp_w: 60,
            heater_w: 2000,
            heater_rate_c_per_min: 0.5,
            leak_open_per_min: 0.2,
            leak_closed_per_min: 0.05,
            clock_duration_ms: 600_000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialDevices {
    pub door_locked: bool,
    pub window_open: bool,
    pub heater_on: bool,
    pub lamp_on: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfficeSpec {
    pub id: Ident,
    pub initial_temp_c: f64,
    #[serde(default)]
    pub initial: InitialDevices,
}

/// Scenario section describing the physical building.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Building {
    #[serde(default)]
    pub params: BuildingParams,
    pub offices: Vec<OfficeSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvAction {
    pub service: Ident,
    pub command: Ident,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arg: Option<Value>,
}

/// One scripted change of the surroundings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvEntry {
    pub t: Millis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weather: Option<Weather>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outside_temp: Option<f64>,
    /// Occupant actions applied straight to devices.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub actions: Vec<EnvAction>,
}

impl EnvEntry {
    pub fn at(t: Millis) -> Self {
        EnvEntry { t, weather: None, outside_temp: None, actions: Vec::new() }
    }

    pub fn weather(mut self, w: Weather) -> Self {
        self.weather = Some(w);
        self
    }

    pub fn outside(mut self, c: f64) -> Self {
        self.outside_temp = Some(c);
        self
    }

    pub fn action(mut self, service: &str, command: &str, arg: Option<Value>) -> Self {
        self.actions.push(EnvAction { service: service.into(), command: command.into(), arg });
        self
    }
}

/// Current surroundings, shared by every office.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Environment {
    pub weather: Weather,
    pub outside_temp: f64,
}

impl Default for Environment {
    fn default() -> Self {
        Environment { weather: Weather::NotSunny, outside_temp: 15.0 }
    }
}

impl Environment {
    pub fn apply(&mut self, entry: &EnvEntry) {
        if let Some(w) = entry.weather {
            self.weather = w;
        }
        if let Some(t) = entry.outside_temp {
            self.outside_temp = t;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceState {
    Door { locked: bool },
    Window { open: bool },
    Heater { on: bool, setpoint_c: f64 },
    Meter { watt_ms: u64 },
    Lamp { on: bool },
    Clock { armed_at: Option<Millis>, duration_ms: Millis },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DeviceError {
    #[error("{service}: unknown command '{command}'")]
    UnknownCommand { service: String, command: String },
    #[error("{service}.{command}: bad argument {arg}")]
    BadArgument { service: String, command: String, arg: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Device {
    pub service: Ident,
    pub kind: DeviceKind,
    pub state: DeviceState,
}

impl Device {
    pub fn new(office: &str, kind: DeviceKind, init: &InitialDevices, params: &BuildingParams) -> Self {
        let state = match kind {
            DeviceKind::Door => DeviceState::Door { locked: init.door_locked },
            DeviceKind::Window => DeviceState::Window { open: init.window_open },
            DeviceKind::Heater => DeviceState::Heater { on: init.heater_on, setpoint_c: params.setpoint_c },
            DeviceKind::Meter => DeviceState::Meter { watt_ms: 0 },
            DeviceKind::Lamp => DeviceState::Lamp { on: init.lamp_on },
            DeviceKind::Clock => DeviceState::Clock { armed_at: None, duration_ms: params.clock_duration_ms },
        };
        Device { service: kind.service_name(office).into(), kind, state }
    }

    pub fn power_w(&self, params: &BuildingParams) -> u64 {
        match self.state {
            DeviceState::Lamp { on: true } => params.lamp_w,
            DeviceState::Heater { on: true, .. } => params.heater_w,
            _ => 0,
        }
    }

    /// Discrete state label, used for end-state comparisons.
    pub fn label(&self) -> Option<&'static str> {
        Some(match self.state {
            DeviceState::Door { locked } => {
                if locked {
                    "locked"
                } else {
                    "unlocked"
                }
            }
            DeviceState::Window { open } => {
                if open {
                    "open"
                } else {
                    "closed"
                }
            }
            DeviceState::Heater { on, .. } | DeviceState::Lamp { on } => {
                if on {
                    "on"
                } else {
                    "off"
                }
            }
            DeviceState::Clock { armed_at, .. } => {
                if armed_at.is_some() {
                    "armed"
                } else {
                    "disarmed"
                }
            }
            DeviceState::Meter { .. } => return None,
        })
    }

    fn bad(&self, command: &str, arg: Option<&Value>) -> DeviceError {
        DeviceError::BadArgument {
            service: self.service.to_string(),
            command: command.into(),
            arg: arg.map_or("(none)".into(), |a| a.to_string()),
        }
    }

    /// Applies a command. Returns the parameters whose value changed, each
    /// as an observation stamped `now`; setting the current state again
    /// changes nothing and returns nothing.
    pub fn apply_command(
        &mut self,
        command: &str,
        arg: Option<&Value>,
        now: Millis,
    ) -> Result<Vec<Observation>, DeviceError> {
        let unknown = || DeviceError::UnknownCommand { service: self.service.to_string(), command: command.into() };
        let no_arg = |this: &Self| match arg {
            None => Ok(()),
            Some(_) => Err(this.bad(command, arg)),
        };
        let bool_arg = |this: &Self| arg.and_then(Value::as_bool).ok_or_else(|| this.bad(command, arg));
        let changed: Option<(&str, Value)> = match (self.kind, command) {
            (DeviceKind::Door, "lock" | "unlock") => {
                no_arg(self)?;
                let want = command == "lock";
                let DeviceState::Door { locked } = &mut self.state else { unreachable!() };
                (*locked != want).then(|| {
                    *locked = want;
                    ("lock_state", Value::symbol(if want { "locked" } else { "unlocked" }))
                })
            }
            (DeviceKind::Window, "open" | "close") => {
                no_arg(self)?;
                let want = command == "open";
                let DeviceState::Window { open } = &mut self.state else { unreachable!() };
                (*open != want).then(|| {
                    *open = want;
                    ("position", Value::symbol(if want { "open" } else { "closed" }))
                })
            }
            (DeviceKind::Heater | DeviceKind::Lamp, "set_power") => {
                let want = bool_arg(self)?;
                let (DeviceState::Heater { on, .. } | DeviceState::Lamp { on }) = &mut self.state else {
                    unreachable!()
                };
                (*on != want).then(|| {
                    *on = want;
                    ("power_state", Value::Bool(want))
                })
            }
            (DeviceKind::Clock, "arm") => {
                let duration = match arg {
                    Some(Value::Int(d)) if *d > 0 => *d as Millis,
                    _ => return Err(self.bad(command, arg)),
                };
                let DeviceState::Clock { armed_at, duration_ms } = &mut self.state else { unreachable!() };
                let was = armed_at.is_some();
                *armed_at = Some(now);
                *duration_ms = duration;
                (!was).then_some(("armed", Value::Bool(true)))
            }
            (DeviceKind::Clock, "disarm") => {
                no_arg(self)?;
                let DeviceState::Clock { armed_at, .. } = &mut self.state else { unreachable!() };
                armed_at.take().map(|_| ("armed", Value::Bool(false)))
            }
            _ => return Err(unknown()),
        };
        Ok(changed
            .map(|(param, value)| Observation {
                service: self.service.clone(),
                parameter: param.into(),
                value,
                timestamp: now,
            })
            .into_iter()
            .collect())
    }
}

/// New room temperature after `dt_ms` with the given heater/window state.
/// Explicit Euler step of the linear model; deterministic.
pub fn step_thermal(
    temp_c: f64,
    heater_on: bool,
    window_open: bool,
    outside_c: f64,
    dt_ms: Millis,
    params: &BuildingParams,
) -> f64 {
    let minutes = dt_ms as f64 / 60_000.0;
    let heat = if heater_on { params.heater_rate_c_per_min } else { 0.0 };
    let k = if window_open { params.leak_open_per_min } else { params.leak_closed_per_min };
    temp_c + (heat + k * (outside_c - temp_c)) * minutes
}

/// Energy drawn at `watts` for `dt_ms`, in watt-milliseconds.
pub fn meter_tick(watts: u64, dt_ms: Millis) -> u64 {
    watts * dt_ms
}

pub fn watt_ms_to_kwh(watt_ms: u64) -> f64 {
    watt_ms as f64 / WATT_MS_PER_KWH as f64
}

/// Live state of one office.
#[derive(Clone, Debug)]
pub struct Office {
    pub id: Ident,
    pub devices: Vec<Device>,
    pub temp_c: f64,
    energy_until: Millis,
    thermal_until: Millis,
}

impl Office {
    pub fn new(spec: &OfficeSpec, params: &BuildingParams) -> Self {
        Office {
            id: spec.id.clone(),
            devices: DeviceKind::ALL.iter().map(|&k| Device::new(&spec.id, k, &spec.initial, params)).collect(),
            temp_c: spec.initial_temp_c,
            energy_until: 0,
            thermal_until: 0,
        }
    }

    pub fn device(&self, kind: DeviceKind) -> &Device {
        &self.devices[kind as usize]
    }

    pub fn device_index(&self, service: &str) -> Option<usize> {
        self.devices.iter().position(|d| &*d.service == service)
    }

    pub fn power_w(&self, params: &BuildingParams) -> u64 {
        self.devices.iter().map(|d| d.power_w(params)).sum()
    }

    pub fn watt_ms(&self) -> u64 {
        match self.device(DeviceKind::Meter).state {
            DeviceState::Meter { watt_ms } => watt_ms,
            _ => unreachable!("meter slot holds a meter"),
        }
    }

    pub fn kwh(&self) -> f64 {
        watt_ms_to_kwh(self.watt_ms())
    }

    /// Integrates the current power draw up to `now`. Called before every
    /// state change so the meter is exact at millisecond resolution.
    pub fn advance_energy(&mut self, now: Millis, params: &BuildingParams) {
        if now <= self.energy_until {
            return;
        }
        let add = meter_tick(self.power_w(params), now - self.energy_until);
        self.energy_until = now;
        if let DeviceState::Meter { watt_ms } = &mut self.devices[DeviceKind::Meter as usize].state {
            *watt_ms += add;
        }
    }

    /// Moves the room temperature forward to `now` under the current heater,
    /// window and outside temperature. Called on every meter tick and before
    /// any change to those, so the trajectory only depends on when changes
    /// happen.
    pub fn advance_thermal(&mut self, now: Millis, env: &Environment, params: &BuildingParams) {
        if now <= self.thermal_until {
            return;
        }
        let heater_on = matches!(self.device(DeviceKind::Heater).state, DeviceState::Heater { on: true, .. });
        let window_open = matches!(self.device(DeviceKind::Window).state, DeviceState::Window { open: true });
        self.temp_c =
            step_thermal(self.temp_c, heater_on, window_open, env.outside_temp, now - self.thermal_until, params);
        self.thermal_until = now;
    }

    /// Brings meter and temperature up to `now`.
    pub fn advance(&mut self, now: Millis, env: &Environment, params: &BuildingParams) {
        self.advance_energy(now, params);
        self.advance_thermal(now, env, params);
    }

    pub fn apply_command(
        &mut self,
        device: usize,
        command: &str,
        arg: Option<&Value>,
        now: Millis,
        env: &Environment,
        params: &BuildingParams,
    ) -> Result<Vec<Observation>, DeviceError> {
        self.advance(now, env, params);
        self.devices[device].apply_command(command, arg, now)
    }

    /// Current value of a device parameter.
    pub fn read(&self, device: usize, parameter: &str, env: &Environment) -> Option<Value> {
        let d = &self.devices[device];
        Some(match (&d.state, parameter) {
            (DeviceState::Door { locked }, "lock_state") => Value::symbol(if *locked { "locked" } else { "unlocked" }),
            (DeviceState::Window { open }, "position") => Value::symbol(if *open { "open" } else { "closed" }),
            (DeviceState::Window { .. }, "weather") => Value::symbol(env.weather.as_str()),
            (DeviceState::Heater { on, .. } | DeviceState::Lamp { on }, "power_state") => Value::Bool(*on),
            (DeviceState::Heater { .. }, "room_temp") => Value::Real(self.temp_c),
            (DeviceState::Meter { watt_ms }, "kwh_reading") => Value::Real(watt_ms_to_kwh(*watt_ms)),
            (DeviceState::Clock { armed_at, .. }, "armed") => Value::Bool(armed_at.is_some()),
            _ => return None,
        })
    }
}

fn enum_type(labels: &[&str]) -> ValueType {
    ValueType::Enum(labels.iter().map(|s| s.to_string()).collect())
}

/// Service declaration for one device kind.
pub fn device_service(office: &str, kind: DeviceKind, sample_interval_ms: Millis) -> Service {
    let p = |name: &str, t: ValueType| ParameterSpec { sample_interval_ms, ..ParameterSpec::new(name, t) };
    let (parameters, commands) = match kind {
        DeviceKind::Door => (
            vec![p("lock_state", enum_type(&["locked", "unlocked"]))],
            vec![CommandSpec::new("lock", None), CommandSpec::new("unlock", None)],
        ),
        DeviceKind::Window => (
            vec![p("position", enum_type(&["open", "closed"])), p("weather", enum_type(&["sunny", "not_sunny"]))],
            vec![CommandSpec::new("open", None), CommandSpec::new("close", None)],
        ),
        DeviceKind::Heater => (
            vec![p("power_state", ValueType::Boolean), p("room_temp", ValueType::Real).with_unit("°C")],
            vec![CommandSpec::new("set_power", Some(ValueType::Boolean))],
        ),
        DeviceKind::Meter => (vec![p("kwh_reading", ValueType::Real).with_unit("kWh")], vec![]),
        DeviceKind::Lamp => {
            (vec![p("power_state", ValueType::Boolean)], vec![CommandSpec::new("set_power", Some(ValueType::Boolean))])
        }
        DeviceKind::Clock => (
            vec![p("armed", ValueType::Boolean)],
            vec![CommandSpec::new("arm", Some(ValueType::Integer)), CommandSpec::new("disarm", None)],
        ),
    };
    Service { name: kind.service_name(office), kind: ServiceKind::PhysicalDevice, parameters, commands }
}

/// The eight office rules: lights off in the sun, the door/clock/lamp
/// sequence and the heater/window band around the setpoint.
pub fn office_policies(office: &str, params: &BuildingParams) -> Vec<Policy> {
    let s = |k: DeviceKind| k.service_name(office);
    let (door, window, heater, lamp, clock) =
        (s(DeviceKind::Door), s(DeviceKind::Window), s(DeviceKind::Heater), s(DeviceKind::Lamp), s(DeviceKind::Clock));
    let eq = |svc: &str, p: &str, v: Value| Condition::compare(svc, p, Comparator::Eq, v);
    let sym = Value::symbol;
    let set = |svc: &str, on: bool| PlannedAction::new(svc, "set_power", Some(Value::Bool(on)));
    let cmd = |svc: &str, c: &str| PlannedAction::new(svc, c, None);
    let hot = Condition::compare(&heater, "room_temp", Comparator::Ge, Value::Real(params.setpoint_c + 1.0));
    let cold = Condition::compare(&heater, "room_temp", Comparator::Le, Value::Real(params.setpoint_c - 1.0));
    let cool_down = vec![set(&heater, false), cmd(&window, "open")];
    let warm_up = vec![cmd(&window, "close"), set(&heater, true)];
    let policy = |name: &str, when: Vec<Condition>, then: Vec<PlannedAction>| Policy {
        name: format!("{office}/{name}").into(),
        when,
        then,
        cooldown_ms: 1000,
    };
    vec![
        policy(
            "lights-off-sunny",
            vec![
                eq(&window, "weather", sym("sunny")),
                eq(&window, "position", sym("open")),
                eq(&lamp, "power_state", Value::Bool(true)),
            ],
            vec![set(&lamp, false)],
        ),
        policy(
            "lock-arms-clock",
            vec![
                eq(&door, "lock_state", sym("locked")),
                eq(&clock, "armed", Value::Bool(false)),
                eq(&lamp, "power_state", Value::Bool(true)),
            ],
            vec![PlannedAction::new(&clock, "arm", Some(Value::Int(params.clock_duration_ms as i64)))],
        ),
        policy(
            "lights-off-after-lock",
            vec![
                Condition::elapsed_since(&door, "lock_state", sym("locked"), params.clock_duration_ms),
                eq(&clock, "armed", Value::Bool(true)),
                eq(&lamp, "power_state", Value::Bool(true)),
            ],
            vec![set(&lamp, false)],
        ),
        policy(
            "unlock-disarms-clock",
            vec![eq(&door, "lock_state", sym("unlocked")), eq(&clock, "armed", Value::Bool(true))],
            vec![cmd(&clock, "disarm")],
        ),
        policy("too-warm-heater", vec![hot.clone(), eq(&heater, "power_state", Value::Bool(true))], cool_down.clone()),
        policy("too-warm-window", vec![hot, eq(&window, "position", sym("closed"))], cool_down),
        policy("too-cold-window", vec![cold.clone(), eq(&window, "position", sym("open"))], warm_up.clone()),
        policy("too-cold-heater", vec![cold, eq(&heater, "power_state", Value::Bool(false))], warm_up),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BuildMode {
    /// Independent office loops.
    Standalone,
    Centralized,
    Decentralized,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BuildOptions {
    pub offices: usize,
    pub mode: BuildMode,
    pub offering: Offering,
    pub params: BuildingParams,
    pub sample_interval_ms: Millis,
    pub initial_temp_c: f64,
    /// Threshold of the master's building-wide energy rule.
    pub budget_kwh: f64,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            offices: 1,
            mode: BuildMode::Standalone,
            offering: Offering::Mapeaas,
            params: BuildingParams::default(),
            sample_interval_ms: crate::model::DEFAULT_SAMPLE_INTERVAL_MS,
            initial_temp_c: 18.0,
            budget_kwh: 5.0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BuildError {
    #[error("a building needs at least one office, got {0}")]
    InvalidCount(usize),
    #[error("{0} mode needs an office-structured scenario")]
    NotABuilding(&'static str),
    #[error("decentralized mode needs at least two offices")]
    GroupTooSmall,
}

pub fn office_id(i: usize) -> String {
    format!("office{i}")
}

fn fog_id(i: usize) -> String {
    format!("fog{i}")
}

/// Generates domain, topology, loops, policies and building section for
/// `offices` offices. The environment timeline is left empty.
pub fn build_smart_building(opts: &BuildOptions) -> Result<Scenario, BuildError> {
    if opts.offices < 1 {
        return Err(BuildError::InvalidCount(opts.offices));
    }
    let mut tasks = Vec::new();
    let mut topology =
        Topology { nodes: vec![Node { id: "cloud".into(), tier: Tier::Cloud, hosts: vec![] }], links: vec![] };
    let mut loops = Vec::new();
    let mut policies = Vec::new();
    let mut offices = Vec::new();
    for i in 1..=opts.offices {
        let office = office_id(i);
        let fog = fog_id(i);
        let services: Vec<Service> =
            DeviceKind::ALL.iter().map(|&k| device_service(&office, k, opts.sample_interval_ms)).collect();
        let names = |kinds: &[DeviceKind]| kinds.iter().map(|k| k.service_name(&office)).collect::<Vec<_>>();
        tasks.push(Task {
            name: office.clone(),
            services,
            composites: vec![
                Composite {
                    name: format!("{office}/lighting"),
                    members: names(&[DeviceKind::Lamp, DeviceKind::Window]),
                    goal: "lights off when daylight is enough".into(),
                },
                Composite {
                    name: format!("{office}/security"),
                    members: names(&[DeviceKind::Door, DeviceKind::Clock, DeviceKind::Lamp]),
                    goal: "lights off a while after the door locks".into(),
                },
                Composite {
                    name: format!("{office}/climate"),
                    members: names(&[DeviceKind::Heater, DeviceKind::Window, DeviceKind::Meter]),
                    goal: "room temperature near the setpoint".into(),
                },
            ],
        });
        topology.nodes.push(Node { id: fog.clone(), tier: Tier::Fog, hosts: vec![] });
        for k in DeviceKind::ALL {
            let svc = k.service_name(&office);
            topology.nodes.push(Node { id: svc.clone(), tier: Tier::Device, hosts: vec![svc.clone()] });
            topology.connect(&svc, &fog);
        }
        topology.connect(&fog, "cloud");
        for j in 1..i {
            topology.connect(&fog_id(j), &fog);
        }
        let office_policies = office_policies(&office, &opts.params);
        let policy_names: Vec<&str> = office_policies.iter().map(|p| &*p.name).collect();
        let scope: Vec<String> = names(&DeviceKind::ALL);
        let scope: Vec<&str> = scope.iter().map(String::as_str).collect();
        loops.push(LoopSpec::new(&office, &scope, opts.offering, &policy_names));
        policies.extend(office_policies);
        offices.push(OfficeSpec {
            id: office.into(),
            initial_temp_c: opts.initial_temp_c,
            initial: InitialDevices::default(),
        });
    }
    let mut scenario = Scenario {
        name: format!("smart-building-{}", opts.offices),
        domain: Domain { name: "smart-building".into(), tasks },
        topology,
        loops,
        policies,
        control: None,
        building: Some(Building { params: opts.params.clone(), offices }),
        environment: Vec::new(),
    };
    set_mode(&mut scenario, opts.mode, opts.budget_kwh)?;
    Ok(scenario)
}

/// Rewrites the control section (and the master loop it needs) of a
/// building scenario. Office loops are left as they are.
pub fn set_mode(scenario: &mut Scenario, mode: BuildMode, budget_kwh: f64) -> Result<(), BuildError> {
    let offices: Vec<Ident> = match &scenario.building {
        Some(b) => b.offices.iter().map(|o| o.id.clone()).collect(),
        None => return Err(BuildError::NotABuilding(mode_name(mode))),
    };
    // Drop any previous master.
    let master_policies: Vec<Ident> =
        scenario.loops.iter().filter(|l| &*l.id == MASTER_LOOP).flat_map(|l| l.policies.clone()).collect();
    scenario.loops.retain(|l| &*l.id != MASTER_LOOP);
    scenario.policies.retain(|p| !master_policies.contains(&p.name));
    scenario.domain.tasks.retain(|t| t.name != MASTER_LOOP);
    scenario.control = None;

    match mode {
        BuildMode::Standalone => {}
        BuildMode::Decentralized => {
            if offices.len() < 2 {
                return Err(BuildError::GroupTooSmall);
            }
            scenario.control = Some(ControlConfig::Decentralized { group: offices, coordinate: vec![Role::Execute] });
        }
        BuildMode::Centralized => {
            let offering = scenario.loops.first().map_or(Offering::Mapeaas, |l| l.offering);
            scenario.domain.tasks.push(Task {
                name: MASTER_LOOP.into(),
                services: vec![Service {
                    name: BUILDING_STATE.into(),
                    kind: ServiceKind::Virtual,
                    parameters: vec![ParameterSpec::new(TOTAL_KWH, ValueType::Real).with_unit("kWh")],
                    commands: vec![],
                }],
                composites: vec![],
            });
            let budget = Policy {
                name: format!("{MASTER_LOOP}/energy-budget").into(),
                when: vec![Condition::compare(BUILDING_STATE, TOTAL_KWH, Comparator::Ge, Value::Real(budget_kwh))],
                then: offices
                    .iter()
                    .map(|o| {
                        PlannedAction::new(&DeviceKind::Lamp.service_name(o), "set_power", Some(Value::Bool(false)))
                    })
                    .collect(),
                cooldown_ms: 3_600_000,
            };
            scenario.loops.push(LoopSpec::new(MASTER_LOOP, &[BUILDING_STATE], offering, &[&budget.name]));
            scenario.policies.push(budget);
            scenario.control = Some(ControlConfig::Centralized {
                master: MasterConfig {
                    loop_id: MASTER_LOOP.into(),
                    node: None,
                    aggregations: vec![AggregationSpec {
                        name: TOTAL_KWH.into(),
                        inputs: offices
                            .iter()
                            .map(|o| AggregationInput {
                                loop_id: o.clone(),
                                service: DeviceKind::Meter.service_name(o).into(),
                                parameter: "kwh_reading".into(),
                            })
                            .collect(),
                        combinator: Combinator::Sum,
                        output: StreamRef { service: BUILDING_STATE.into(), parameter: TOTAL_KWH.into() },
                    }],
                },
            });
        }
    }
    Ok(())
}

fn mode_name(mode: BuildMode) -> &'static str {
    match mode {
        BuildMode::Standalone => "standalone",
        BuildMode::Centralized => "centralized",
        BuildMode::Decentralized => "decentralized",
    }
}

/// Discrete device states by service, without meters and temperatures.
pub fn snapshot(offices: &[Office]) -> BTreeMap<String, String> {
    offices
        .iter()
        .flat_map(|o| o.devices.iter())
        .filter_map(|d| d.label().map(|l| (d.service.to_string(), l.to_string())))
        .collect()
}
