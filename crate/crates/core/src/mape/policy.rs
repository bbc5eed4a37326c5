//! Event-condition-action policies that give the analyze and plan
//! activities their semantics.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{Domain, ValidationReport};
use crate::value::{Ident, Millis, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Policy {
    pub name: Ident,
    pub when: Vec<Condition>,
    pub then: Vec<PlannedAction>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub cooldown_ms: Millis,
}

fn is_zero(v: &Millis) -> bool {
    *v == 0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "==")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = ">")]
    Gt,
}

impl Comparator {
    pub fn is_equality(self) -> bool {
        matches!(self, Comparator::Eq | Comparator::Ne)
    }

    pub fn holds(self, ord: std::cmp::Ordering) -> bool {
        use std::cmp::Ordering::*;
        match self {
            Comparator::Lt => ord == Less,
            Comparator::Le => ord != Greater,
            Comparator::Eq => ord == Equal,
            Comparator::Ne => ord != Equal,
            Comparator::Ge => ord != Less,
            Comparator::Gt => ord == Greater,
        }
    }
}

impl fmt::Display for Comparator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Comparator::Lt => "<",
            Comparator::Le => "<=",
            Comparator::Eq => "==",
            Comparator::Ne => "!=",
            Comparator::Ge => ">=",
            Comparator::Gt => ">",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Comparison {
    pub service: Ident,
    pub parameter: Ident,
    pub op: Comparator,
    pub value: Value,
}

/// True once the stream has held `value` continuously for at least `ms`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElapsedSince {
    pub service: Ident,
    pub parameter: Ident,
    pub value: Value,
    pub ms: Millis,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Condition {
    Compare(Comparison),
    Elapsed { elapsed_since: ElapsedSince },
}

impl Condition {
    pub fn compare(service: &str, parameter: &str, op: Comparator, value: Value) -> Self {
        Condition::Compare(Comparison { service: service.into(), parameter: parameter.into(), op, value })
    }

    pub fn elapsed_since(service: &str, parameter: &str, value: Value, ms: Millis) -> Self {
        Condition::Elapsed {
            elapsed_since: ElapsedSince { service: service.into(), parameter: parameter.into(), value, ms },
        }
    }

    pub fn stream(&self) -> (&Ident, &Ident) {
        match self {
            Condition::Compare(c) => (&c.service, &c.parameter),
            Condition::Elapsed { elapsed_since: e } => (&e.service, &e.parameter),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannedAction {
    pub service: Ident,
    pub command: Ident,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arg: Option<Value>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub delay_ms: Millis,
}

impl PlannedAction {
    pub fn new(service: &str, command: &str, arg: Option<Value>) -> Self {
        PlannedAction { service: service.into(), command: command.into(), arg, delay_ms: 0 }
    }

    pub fn delayed(mut self, delay_ms: Millis) -> Self {
        self.delay_ms = delay_ms;
        self
    }
}

impl fmt::Display for PlannedAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.service, self.command)?;
        if let Some(arg) = &self.arg {
            write!(f, "({arg})")?;
        }
        if self.delay_ms > 0 {
            write!(f, "+{}ms", self.delay_ms)?;
        }
        Ok(())
    }
}

/// Checks policies against the domain they will run in.
pub fn validate_policies(policies: &[Policy], domain: &Domain) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut names = BTreeSet::new();
    for (i, p) in policies.iter().enumerate() {
        let path = format!("policies[{i}]");
        if p.name.is_empty() {
            report.push(format!("{path}.name"), "policy name must be non-empty");
        }
        if !names.insert(p.name.clone()) {
            report.push(format!("{path}.name"), format!("duplicate policy name '{}'", p.name));
        }
        if p.when.is_empty() {
            report.push(format!("{path}.when"), "when-clause must be non-empty");
        }
        if p.then.is_empty() {
            report.push(format!("{path}.then"), "then-list must be non-empty");
        }
        for (ci, cond) in p.when.iter().enumerate() {
            let cpath = format!("{path}.when[{ci}]");
            let (service, parameter) = cond.stream();
            let Some(spec) = domain.parameter(service, parameter) else {
                report.push(cpath, format!("unknown parameter '{service}.{parameter}'"));
                continue;
            };
            match cond {
                Condition::Compare(c) => {
                    if !spec.value_type.accepts_literal(&c.value) {
                        report.push(cpath, format!("threshold {} does not fit type {}", c.value, spec.value_type));
                    } else if !c.op.is_equality() && !spec.value_type.is_numeric() {
                        report.push(cpath, format!("comparator {} needs a numeric parameter", c.op));
                    }
                }
                Condition::Elapsed { elapsed_since: e } => {
                    if !spec.value_type.accepts_literal(&e.value) {
                        report.push(cpath, format!("value {} does not fit type {}", e.value, spec.value_type));
                    }
                }
            }
        }
        for (ai, action) in p.then.iter().enumerate() {
            let apath = format!("{path}.then[{ai}]");
            let Some(cmd) = domain.command(&action.service, &action.command) else {
                report.push(apath, format!("unknown command '{}.{}'", action.service, action.command));
                continue;
            };
            match (&cmd.argument_type, &action.arg) {
                (None, None) => {}
                (Some(t), Some(v)) if t.accepts_literal(v) => {}
                (None, Some(_)) => report.push(apath, format!("command '{}' takes no argument", cmd.name)),
                (Some(t), _) => report.push(apath, format!("command '{}' needs a {t} argument", cmd.name)),
            }
        }
    }
    report
}
