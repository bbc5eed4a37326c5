//! Discrete-event core: virtual clock, FIFO-stable event queue, three-tier
//! topology with latency-stamped message delivery and seeded jitter.

mod topology;
pub mod trace;

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use topology::{
    validate_topology, Link, Node, Route, RouteTable, Tier, Topology, DEFAULT_DEVICE_FOG_LATENCY_MS,
    DEFAULT_FOG_CLOUD_LATENCY_MS, DEFAULT_FOG_FOG_LATENCY_MS,
};
pub use trace::{EventTrace, TraceEvent, TraceHeader, TraceKind, TraceSink};

use crate::coordination::InteractionKind;
use crate::value::{Ident, Millis};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("cannot schedule at t={at}: clock is already at {clock}")]
    PastEvent { at: Millis, clock: Millis },
    #[error("no route from '{from}' to '{to}'")]
    NoRoute { from: String, to: String },
}

/// Handle returned by [`Scheduler::schedule`]; the insertion sequence number.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventHandle(pub u64);

struct Entry<E> {
    at: Millis,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    // Reversed: BinaryHeap is a max-heap and we pop the earliest (at, seq).
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

/// Event queue ordered by (time, insertion sequence).
pub struct Scheduler<E> {
    heap: BinaryHeap<Entry<E>>,
    clock: Millis,
    next_seq: u64,
}

impl<E> Default for Scheduler<E> {
    fn default() -> Self {
        Scheduler { heap: BinaryHeap::new(), clock: 0, next_seq: 0 }
    }
}

impl<E> Scheduler<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clock(&self) -> Millis {
        self.clock
    }

    pub fn pending(&self) -> usize {
        self.heap.len()
    }

    pub fn schedule(&mut self, event: E, at: Millis) -> Result<EventHandle, SimError> {
        if at < self.clock {
            return Err(SimError::PastEvent { at, clock: self.clock });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry { at, seq, event });
        Ok(EventHandle(seq))
    }

    pub fn peek_time(&self) -> Option<Millis> {
        self.heap.peek().map(|e| e.at)
    }

    /// Pops the next event if it is due at or before `horizon`, advancing the
    /// clock to its time.
    pub fn pop_until(&mut self, horizon: Millis) -> Option<(Millis, E)> {
        if self.peek_time()? > horizon {
            return None;
        }
        let e = self.heap.pop()?;
        self.clock = e.at;
        Some((e.at, e.event))
    }

    /// Processes every event with time ≤ `horizon` in (time, seq) order. The
    /// handler may schedule further events. Afterwards the clock sits at
    /// `min(horizon, latest event time)`.
    pub fn run_until(&mut self, horizon: Millis, mut handler: impl FnMut(&mut Self, Millis, E)) {
        while let Some((t, e)) = self.pop_until(horizon) {
            handler(self, t, e);
        }
        if self.peek_time().is_some() {
            self.clock = self.clock.max(horizon);
        }
    }
}

/// A component instance addressed on a node.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Address {
    pub node: Ident,
    pub component: Ident,
}

impl Address {
    pub fn new(node: &str, component: &str) -> Self {
        Address { node: node.into(), component: component.into() }
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.node == self.component {
            f.write_str(&self.node)
        } else {
            write!(f, "{}@{}", self.component, self.node)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Message<P> {
    pub id: u64,
    pub kind: InteractionKind,
    pub payload: P,
    pub from: Address,
    pub to: Address,
    pub send_time: Millis,
    pub delivery_time: Millis,
    pub route: Route,
}

/// Routing plus seeded per-hop jitter.
pub struct Network {
    routes: RouteTable,
    rng: ChaCha8Rng,
    next_msg: u64,
}

impl Network {
    pub fn new(topology: &Topology, seed: u64) -> Self {
        Network { routes: RouteTable::new(topology), rng: ChaCha8Rng::seed_from_u64(seed), next_msg: 0 }
    }

    pub fn routes(&self) -> &RouteTable {
        &self.routes
    }

    pub fn messages_sent(&self) -> u64 {
        self.next_msg
    }

    /// Stamps a message with its delivery time: send time plus every hop's
    /// latency plus a uniform jitter sample in `[0, jitter]` per hop.
    pub fn send<P>(
        &mut self,
        kind: InteractionKind,
        payload: P,
        from: Address,
        to: Address,
        now: Millis,
    ) -> Result<Message<P>, SimError> {
        let route = self
            .routes
            .route(&from.node, &to.node)
            .ok_or_else(|| SimError::NoRoute { from: from.node.to_string(), to: to.node.to_string() })?
            .clone();
        let mut delivery = now + route.latency;
        for &(_, jitter) in route.hops.iter() {
            if jitter > 0 {
                delivery += self.rng.gen_range(0..=jitter);
            }
        }
        let id = self.next_msg;
        self.next_msg += 1;
        Ok(Message { id, kind, payload, from, to, send_time: now, delivery_time: delivery, route })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_time_events_run_fifo() {
        let mut q = Scheduler::new();
        q.schedule("late", 200).unwrap();
        q.schedule("A", 100).unwrap();
        q.schedule("B", 100).unwrap();
        q.schedule("now", 0).unwrap();
        let mut seen = Vec::new();
        q.run_until(1000, |_, t, e| seen.push((t, e)));
        assert_eq!(seen, [(0, "now"), (100, "A"), (100, "B"), (200, "late")]);
        assert_eq!(q.clock(), 200);
    }

    #[test]
    fn past_events_are_rejected() {
        let mut q = Scheduler::new();
        q.schedule((), 10).unwrap();
        q.run_until(10, |_, _, _| {});
        assert_eq!(q.schedule((), 9), Err(SimError::PastEvent { at: 9, clock: 10 }));
        assert!(q.schedule((), 10).is_ok());
    }

    #[test]
    fn empty_run_leaves_clock_at_zero() {
        let mut q: Scheduler<()> = Scheduler::new();
        q.run_until(5000, |_, _, _| unreachable!());
        assert_eq!(q.clock(), 0);
    }

    #[test]
    fn horizon_zero_runs_only_time_zero() {
        let mut q = Scheduler::new();
        q.schedule(1, 0).unwrap();
        q.schedule(2, 1).unwrap();
        let mut seen = Vec::new();
        q.run_until(0, |_, _, e| seen.push(e));
        assert_eq!(seen, [1]);
        assert_eq!(q.clock(), 0);
    }

    #[test]
    fn handler_can_schedule_follow_ups() {
        let mut q = Scheduler::new();
        q.schedule(0u32, 0).unwrap();
        let mut count = 0;
        q.run_until(1000, |q, t, n| {
            count += 1;
            if n < 20 {
                q.schedule(n + 1, t + 100).unwrap();
            }
        });
        assert_eq!(count, 11);
        assert_eq!(q.clock(), 1000);
    }

    fn three_tier(jitter: Millis) -> Topology {
        Topology {
            nodes: vec![
                Node { id: "lamp".into(), tier: Tier::Device, hosts: vec!["lamp".into()] },
                Node { id: "fog1".into(), tier: Tier::Fog, hosts: vec![] },
                Node { id: "cloud".into(), tier: Tier::Cloud, hosts: vec![] },
                Node { id: "island".into(), tier: Tier::Device, hosts: vec![] },
            ],
            links: vec![
                Link { a: "lamp".into(), b: "fog1".into(), latency_ms: 1, jitter_ms: 0 },
                Link { a: "fog1".into(), b: "cloud".into(), latency_ms: 50, jitter_ms: jitter },
            ],
        }
    }

    #[test]
    fn delivery_adds_path_latency() {
        let mut net = Network::new(&three_tier(0), 7);
        let up = net
            .send(InteractionKind::Sense, (), Address::new("lamp", "lamp"), Address::new("fog1", "m"), 1000)
            .unwrap();
        assert_eq!(up.delivery_time, 1001);
        let far =
            net.send(InteractionKind::Sense, (), Address::new("fog1", "m"), Address::new("cloud", "k"), 0).unwrap();
        assert_eq!(far.delivery_time, 50);
        assert_eq!(far.id, 1);
        let err = net.send(InteractionKind::Sense, (), Address::new("lamp", "lamp"), Address::new("island", "x"), 0);
        assert!(matches!(err, Err(SimError::NoRoute { .. })));
    }

    #[test]
    fn jitter_is_bounded_and_seeded() {
        let sample = |seed| {
            let mut net = Network::new(&three_tier(10), seed);
            (0..50)
                .map(|i| {
                    net.send(InteractionKind::Sense, (), Address::new("fog1", "m"), Address::new("cloud", "k"), i)
                        .unwrap()
                        .delivery_time
                        - i
                })
                .collect::<Vec<_>>()
        };
        let a = sample(1);
        assert_eq!(a, sample(1));
        assert!(a.iter().all(|d| (50..=60).contains(d)));
        assert!(a.iter().any(|&d| d != a[0]));
    }
}
