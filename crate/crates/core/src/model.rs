//! Managed-system metamodel: a [`Domain`] is made of [`Task`]s, each task
//! declares the [`Service`]s that realise it and groups them into
//! [`Composite`]s. Services expose parameters (sensed) and commands
//! (actuated); together these are the touchpoints a control loop uses.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::value::{Millis, ValueType};

pub const DEFAULT_SAMPLE_INTERVAL_MS: Millis = 100;

fn default_sample_interval() -> Millis {
    DEFAULT_SAMPLE_INTERVAL_MS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Domain {
    pub name: String,
    pub tasks: Vec<Task>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Task {
    pub name: String,
    pub services: Vec<Service>,
    #[serde(default)]
    pub composites: Vec<Composite>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceKind {
    PhysicalDevice,
    Virtual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Service {
    pub name: String,
    pub kind: ServiceKind,
    #[serde(default)]
    pub parameters: Vec<ParameterSpec>,
    #[serde(default)]
    pub commands: Vec<CommandSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Composite {
    pub name: String,
    pub members: Vec<String>,
    #[serde(default)]
    pub goal: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterSpec {
    pub name: String,
    pub value_type: ValueType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    #[serde(default = "default_sample_interval")]
    pub sample_interval_ms: Millis,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub argument_type: Option<ValueType>,
}

impl ParameterSpec {
    pub fn new(name: &str, value_type: ValueType) -> Self {
        ParameterSpec { name: name.to_string(), value_type, unit: None, sample_interval_ms: DEFAULT_SAMPLE_INTERVAL_MS }
    }

    pub fn with_unit(mut self, unit: &str) -> Self {
        self.unit = Some(unit.to_string());
        self
    }
}

impl CommandSpec {
    pub fn new(name: &str, argument_type: Option<ValueType>) -> Self {
        CommandSpec { name: name.to_string(), argument_type }
    }
}

impl Service {
    pub fn parameter(&self, name: &str) -> Option<&ParameterSpec> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn command(&self, name: &str) -> Option<&CommandSpec> {
        self.commands.iter().find(|c| c.name == name)
    }
}

impl Task {
    pub fn service(&self, name: &str) -> Option<&Service> {
        self.services.iter().find(|s| s.name == name)
    }
}

impl Domain {
    /// All services in declaration order across tasks.
    pub fn services(&self) -> impl Iterator<Item = &Service> {
        self.tasks.iter().flat_map(|t| t.services.iter())
    }

    pub fn service(&self, name: &str) -> Option<&Service> {
        self.services().find(|s| s.name == name)
    }

    pub fn parameter(&self, service: &str, parameter: &str) -> Option<&ParameterSpec> {
        self.service(service)?.parameter(parameter)
    }

    pub fn command(&self, service: &str, command: &str) -> Option<&CommandSpec> {
        self.service(service)?.command(command)
    }
}

/// One invariant violation, addressed by a path into the checked structure.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            f.write_str(&self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

/// List of violations; empty means valid.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.violations.len()
    }

    pub fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation { path: path.into(), message: message.into() });
    }

    pub fn extend(&mut self, other: ValidationReport) {
        self.violations.extend(other.violations);
    }

    pub fn iter(&self) -> impl Iterator<Item = &Violation> {
        self.violations.iter()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("composite '{composite}': unknown member '{member}'")]
    UnknownMember { composite: String, member: String },
}

/// Checks every metamodel invariant and returns all violations found.
pub fn validate_domain(domain: &Domain) -> ValidationReport {
    let mut report = ValidationReport::default();
    if domain.name.trim().is_empty() {
        report.push("name", "domain name must be non-empty");
    }
    if domain.tasks.is_empty() {
        report.push("tasks", "at least one task");
    }

    let mut task_names = BTreeSet::new();
    let mut all_services = BTreeSet::new();
    for (ti, task) in domain.tasks.iter().enumerate() {
        let tpath = format!("tasks[{ti}]");
        if task.name.trim().is_empty() {
            report.push(format!("{tpath}.name"), "task name must be non-empty");
        }
        if !task_names.insert(task.name.as_str()) {
            report.push(format!("{tpath}.name"), format!("duplicate task name '{}'", task.name));
        }

        let mut local = BTreeSet::new();
        for (si, service) in task.services.iter().enumerate() {
            let spath = format!("{tpath}.services[{si}]");
            if service.name.trim().is_empty() {
                report.push(format!("{spath}.name"), "service name must be non-empty");
            }
            if !local.insert(service.name.as_str()) {
                report.push(format!("{spath}.name"), format!("duplicate service name '{}' in task", service.name));
            } else if !all_services.insert(service.name.as_str()) {
                // Policies and loops address services by bare name.
                report.push(
                    format!("{spath}.name"),
                    format!("service name '{}' already declared in another task", service.name),
                );
            }
            validate_service(service, &spath, &mut report);
        }

        for (ci, composite) in task.composites.iter().enumerate() {
            let cpath = format!("{tpath}.composites[{ci}]");
            if composite.members.is_empty() {
                report.push(cpath.clone(), format!("composite '{}' has no members", composite.name));
            }
            let mut seen = BTreeSet::new();
            for member in &composite.members {
                if !seen.insert(member.as_str()) {
                    report.push(cpath.clone(), format!("duplicate member '{member}'"));
                }
                if task.service(member).is_none() {
                    report.push(cpath.clone(), format!("unknown member '{member}'"));
                }
            }
        }
    }
    report
}

fn validate_service(service: &Service, spath: &str, report: &mut ValidationReport) {
    if service.kind == ServiceKind::PhysicalDevice && service.parameters.is_empty() && service.commands.is_empty() {
        report.push(spath, "physical device needs at least one parameter or command");
    }
    let mut params = BTreeSet::new();
    for (pi, p) in service.parameters.iter().enumerate() {
        let ppath = format!("{spath}.parameters[{pi}]");
        if !params.insert(p.name.as_str()) {
            report.push(ppath.clone(), format!("duplicate parameter '{}'", p.name));
        }
        if p.sample_interval_ms == 0 {
            report.push(ppath.clone(), "sample_interval_ms must be > 0");
        }
        if let ValueType::Enum(labels) = &p.value_type {
            if labels.is_empty() {
                report.push(ppath, "enum type needs at least one label");
            }
        }
    }
    let mut commands = BTreeSet::new();
    for (ci, c) in service.commands.iter().enumerate() {
        let cpath = format!("{spath}.commands[{ci}]");
        if !commands.insert(c.name.as_str()) {
            report.push(cpath.clone(), format!("duplicate command '{}'", c.name));
        }
        if params.contains(c.name.as_str()) {
            report.push(cpath, format!("'{}' is both a parameter and a command", c.name));
        }
    }
}

/// Sensor and effector surface of a service, in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct Touchpoints<'a> {
    pub sensors: Vec<&'a ParameterSpec>,
    pub effectors: Vec<&'a CommandSpec>,
}

pub fn touchpoints(service: &Service) -> Touchpoints<'_> {
    Touchpoints { sensors: service.parameters.iter().collect(), effectors: service.commands.iter().collect() }
}

/// Resolves a composite's members against the task, dropping duplicates and
/// keeping first-occurrence order.
pub fn composite_closure<'a>(task: &'a Task, composite: &Composite) -> Result<Vec<&'a Service>, ModelError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for member in &composite.members {
        let service = task
            .service(member)
            .ok_or_else(|| ModelError::UnknownMember { composite: composite.name.clone(), member: member.clone() })?;
        if seen.insert(member.as_str()) {
            out.push(service);
        }
    }
    Ok(out)
}
