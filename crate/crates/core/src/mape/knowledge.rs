use std::collections::{BTreeMap, VecDeque};

use serde::Serialize;

use super::MapeError;
use crate::value::{Ident, Millis, Value};

/// A sampled parameter value.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Observation {
    pub service: Ident,
    pub parameter: Ident,
    pub value: Value,
    pub timestamp: Millis,
}

impl Observation {
    pub fn new(service: &str, parameter: &str, value: Value, timestamp: Millis) -> Self {
        Observation { service: service.into(), parameter: parameter.into(), value, timestamp }
    }
}

/// Most recent value of one (service, parameter) stream. `since` is the
/// timestamp at which the stream first took its current value.
#[derive(Clone, Debug, PartialEq)]
pub struct LatestEntry {
    pub value: Value,
    pub timestamp: Millis,
    pub since: Millis,
}

#[derive(Clone, Debug, Default)]
pub struct KnowledgeBase {
    latest: BTreeMap<Ident, BTreeMap<Ident, LatestEntry>>,
    history: VecDeque<Observation>,
    history_limit: Option<usize>,
    version: u64,
}

impl KnowledgeBase {
    pub fn new() -> Self {
        Self::default()
    }

    /// Keeps only the newest `limit` history entries. The latest-value map and
    /// the version counter are unaffected.
    pub fn with_history_limit(limit: usize) -> Self {
        KnowledgeBase { history_limit: Some(limit), ..Self::default() }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn latest(&self, service: &str, parameter: &str) -> Option<&LatestEntry> {
        self.latest.get(service)?.get(parameter)
    }

    pub fn latest_len(&self) -> usize {
        self.latest.values().map(BTreeMap::len).sum()
    }

    /// Latest value of a stream as an observation.
    pub fn latest_observation(&self, service: &str, parameter: &str) -> Option<Observation> {
        let (svc, params) = self.latest.get_key_value(service)?;
        let (param, entry) = params.get_key_value(parameter)?;
        Some(Observation {
            service: svc.clone(),
            parameter: param.clone(),
            value: entry.value.clone(),
            timestamp: entry.timestamp,
        })
    }

    pub fn history(&self) -> impl Iterator<Item = &Observation> {
        self.history.iter()
    }

    /// Records an observation. Timestamps within one stream may repeat but
    /// never go backwards; a regressing observation leaves the KB untouched.
    pub fn put(&mut self, obs: Observation) -> Result<(), MapeError> {
        let stream = self.latest.entry(obs.service.clone()).or_default();
        match stream.get_mut(&obs.parameter) {
            Some(entry) => {
                if obs.timestamp < entry.timestamp {
                    return Err(MapeError::StaleObservation {
                        service: obs.service.to_string(),
                        parameter: obs.parameter.to_string(),
                        latest: entry.timestamp,
                        got: obs.timestamp,
                    });
                }
                if entry.value != obs.value {
                    entry.since = obs.timestamp;
                    entry.value = obs.value.clone();
                }
                entry.timestamp = obs.timestamp;
            }
            None => {
                stream.insert(
                    obs.parameter.clone(),
                    LatestEntry { value: obs.value.clone(), timestamp: obs.timestamp, since: obs.timestamp },
                );
            }
        }
        self.history.push_back(obs);
        if let Some(limit) = self.history_limit {
            while self.history.len() > limit {
                self.history.pop_front();
            }
        }
        self.version += 1;
        Ok(())
    }
}
