//! Typed parameter values shared by the managed-system model, the knowledge
//! base and the policy engine.

use std::cmp::Ordering;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// Shared, cheaply clonable identifier.
pub type Ident = Arc<str>;

/// Virtual time in integer milliseconds.
pub type Millis = u64;

/// Declared type of a parameter or command argument.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueType {
    Boolean,
    Integer,
    Real,
    /// A closed set of string labels.
    Enum(Vec<String>),
}

impl ValueType {
    pub fn is_numeric(&self) -> bool {
        matches!(self, ValueType::Integer | ValueType::Real)
    }

    /// Whether `value` is an instance of this type. Integers are not accepted
    /// where reals are declared; devices report exact types.
    pub fn admits(&self, value: &Value) -> bool {
        match (self, value) {
            (ValueType::Boolean, Value::Bool(_)) => true,
            (ValueType::Integer, Value::Int(_)) => true,
            (ValueType::Real, Value::Real(x)) => x.is_finite(),
            (ValueType::Enum(labels), Value::Symbol(s)) => labels.iter().any(|l| **l == **s),
            _ => false,
        }
    }

    /// Looser check used for policy thresholds and command arguments, where a
    /// literal `22` should be usable against a real-valued parameter.
    pub fn accepts_literal(&self, value: &Value) -> bool {
        match (self, value) {
            (ValueType::Real, Value::Int(_)) => true,
            _ => self.admits(value),
        }
    }
}

impl fmt::Display for ValueType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValueType::Boolean => f.write_str("boolean"),
            ValueType::Integer => f.write_str("integer"),
            ValueType::Real => f.write_str("real"),
            ValueType::Enum(labels) => write!(f, "enum{{{}}}", labels.join(",")),
        }
    }
}

/// A runtime value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Bool(bool),
    Int(i64),
    Real(f64),
    Symbol(Ident),
    /// Ordered tuple produced by vector aggregation of a system state.
    Tuple(Vec<Value>),
}

impl Value {
    pub fn symbol(s: &str) -> Self {
        Value::Symbol(Arc::from(s))
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Real(x) => Some(*x),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, Value::Int(_) | Value::Real(_))
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Value::Bool(_) => "boolean",
            Value::Int(_) => "integer",
            Value::Real(_) => "real",
            Value::Symbol(_) => "enum",
            Value::Tuple(_) => "tuple",
        }
    }

    /// Compares two values of compatible types. Numeric values compare across
    /// integer/real; anything else must match variant exactly. Returns `None`
    /// for incompatible pairs.
    pub fn compare(&self, other: &Value) -> Option<Ordering> {
        match (self, other) {
            (Value::Int(a), Value::Int(b)) => Some(a.cmp(b)),
            (a, b) if a.is_numeric() && b.is_numeric() => {
                let (x, y) = (a.as_f64()?, b.as_f64()?);
                x.partial_cmp(&y)
            }
            (Value::Bool(a), Value::Bool(b)) => Some(a.cmp(b)),
            (Value::Symbol(a), Value::Symbol(b)) => Some(a.cmp(b)),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Bool(b) => write!(f, "{b}"),
            Value::Int(i) => write!(f, "{i}"),
            Value::Real(x) => write!(f, "{x}"),
            Value::Symbol(s) => f.write_str(s),
            Value::Tuple(items) => {
                f.write_str("(")?;
                for (i, v) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{v}")?;
                }
                f.write_str(")")
            }
        }
    }
}
