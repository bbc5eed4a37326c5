//! Simulation trace: a header line followed by one JSON object per event.

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::sync::Arc;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::Tier;
use crate::coordination::InteractionKind;
use crate::value::{Ident, Millis};

pub const TRACE_FORMAT: &str = "fogloop-trace/1";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceHeader {
    pub trace: &'static str,
    pub seed: u64,
    pub config_digest: String,
    pub horizon_ms: Millis,
    /// Tier of every node, so hop counts can be tallied from the trace alone.
    pub nodes: BTreeMap<String, Tier>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Init,
    Env,
    Send,
    Deliver,
    Stale,
    Symptom,
    Plan,
    Dispatch,
    Effect,
    Aggregate,
    Delegate,
    RoundOpen,
    RoundDecide,
    RoundComplete,
    RoundAbort,
    Final,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Detail {
    Send { msg: u64, ia: InteractionKind, path: Arc<[Ident]>, deliver_at: Millis },
    Deliver { msg: u64, ia: InteractionKind },
    Json(serde_json::Value),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceEvent {
    pub t: Millis,
    pub kind: TraceKind,
    pub src: Ident,
    pub dst: Ident,
    pub detail: Detail,
}

/// Destination for trace events as the simulation produces them.
pub trait TraceSink {
    fn header(&mut self, header: &TraceHeader);
    fn record(&mut self, event: TraceEvent);
}

/// Discards everything.
#[derive(Debug, Default)]
pub struct NullSink;

impl TraceSink for NullSink {
    fn header(&mut self, _: &TraceHeader) {}
    fn record(&mut self, _: TraceEvent) {}
}

fn write_line<W: Write, T: Serialize>(w: &mut W, item: &T) -> io::Result<()> {
    serde_json::to_writer(&mut *w, item).map_err(io::Error::other)?;
    w.write_all(b"\n")
}

/// Streams JSON Lines to a writer. The first I/O error is kept and later
/// writes are skipped.
pub struct JsonlSink<W: Write> {
    out: W,
    error: Option<io::Error>,
    lines: u64,
}

impl<W: Write> JsonlSink<W> {
    pub fn new(out: W) -> Self {
        JsonlSink { out, error: None, lines: 0 }
    }

    pub fn lines(&self) -> u64 {
        self.lines
    }

    pub fn finish(mut self) -> io::Result<W> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        self.out.flush()?;
        Ok(self.out)
    }

    fn write<T: Serialize>(&mut self, item: &T) {
        if self.error.is_some() {
            return;
        }
        match write_line(&mut self.out, item) {
            Ok(()) => self.lines += 1,
            Err(e) => self.error = Some(e),
        }
    }
}

impl<W: Write> TraceSink for JsonlSink<W> {
    fn header(&mut self, header: &TraceHeader) {
        self.write(header);
    }

    fn record(&mut self, event: TraceEvent) {
        self.write(&event);
    }
}

/// SHA-256 over the exact JSONL bytes, without keeping them.
#[derive(Default)]
pub struct DigestSink {
    hasher: Sha256,
    buf: Vec<u8>,
    lines: u64,
}

impl DigestSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn lines(&self) -> u64 {
        self.lines
    }

    pub fn hex_digest(self) -> String {
        hex::encode(self.hasher.finalize())
    }

    fn write<T: Serialize>(&mut self, item: &T) {
        self.buf.clear();
        write_line(&mut self.buf, item).expect("serialising to memory");
        self.hasher.update(&self.buf);
        self.lines += 1;
    }
}

impl TraceSink for DigestSink {
    fn header(&mut self, header: &TraceHeader) {
        self.write(header);
    }

    fn record(&mut self, event: TraceEvent) {
        self.write(&event);
    }
}

/// In-memory trace.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EventTrace {
    pub header: Option<TraceHeader>,
    pub events: Vec<TraceEvent>,
}

impl EventTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn of_kind(&self, kind: TraceKind) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        if let Some(h) = &self.header {
            write_line(&mut out, h).expect("serialising to memory");
        }
        for e in &self.events {
            write_line(&mut out, e).expect("serialising to memory");
        }
        out
    }
}

impl TraceSink for EventTrace {
    fn header(&mut self, header: &TraceHeader) {
        self.header = Some(header.clone());
    }

    fn record(&mut self, event: TraceEvent) {
        self.events.push(event);
    }
}

/// Fans out to two sinks.
pub struct Tee<'a, A: TraceSink + ?Sized, B: TraceSink + ?Sized>(pub &'a mut A, pub &'a mut B);

impl<A: TraceSink + ?Sized, B: TraceSink + ?Sized> TraceSink for Tee<'_, A, B> {
    fn header(&mut self, header: &TraceHeader) {
        self.0.header(header);
        self.1.header(header);
    }

    fn record(&mut self, event: TraceEvent) {
        self.0.record(event.clone());
        self.1.record(event);
    }
}
