//! Event records emitted by the simulator and the checks they must pass.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{Nanos, SimError};
use crate::trace::Phase;

/// Serial resources. Declaration order is the tie-break priority.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Comm,
    Predict,
    Compute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    TransferStart,
    TransferEnd,
    OpStart,
    OpEnd,
    /// Gate outcome available.
    Gate,
    Sync,
    PredictStart,
    PredictEnd,
    /// A mispredicted slot is being replaced by the true expert.
    Refetch,
    Evict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    NonMoe,
    Gate,
    Expert,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub time_ns: Nanos,
    pub stream: Stream,
    pub kind: EventKind,
    pub phase: Phase,
    /// Decode step index; 0 in prefill.
    pub step: usize,
    pub layer: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub expert: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub op: Option<OpKind>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tokens: Option<usize>,
    /// Synchronization point number (1 or 2).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sync: Option<u8>,
    pub seq: u64,
}

/// Events ordered by `(time, stream, seq)`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventTimeline {
    pub events: Vec<Event>,
}

type ExpertKey = (Phase, usize, usize, usize);

fn key(e: &Event) -> Option<ExpertKey> {
    e.expert.map(|x| (e.phase, e.step, e.layer, x))
}

impl EventTimeline {
    pub(crate) fn from_unsorted(mut events: Vec<Event>) -> Self {
        events.sort_by_key(|e| (e.time_ns, e.stream, e.seq));
        EventTimeline { events }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn end_ns(&self) -> Nanos {
        self.events.iter().map(|e| e.time_ns).max().unwrap_or(0)
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    /// `(start, end)` of every busy interval on `stream`, in start order.
    pub fn intervals(&self, stream: Stream) -> Vec<(Nanos, Nanos, &Event)> {
        let (open, close) = match stream {
            Stream::Comm => (EventKind::TransferStart, EventKind::TransferEnd),
            Stream::Predict => (EventKind::PredictStart, EventKind::PredictEnd),
            Stream::Compute => (EventKind::OpStart, EventKind::OpEnd),
        };
        let mut starts: HashMap<_, Vec<&Event>> = HashMap::new();
        let mut out = Vec::new();
        for e in self.events.iter().filter(|e| e.stream == stream) {
            let k = (e.phase, e.step, e.layer, e.expert, e.op);
            if e.kind == open {
                starts.entry(k).or_default().push(e);
            } else if e.kind == close {
                if let Some(s) = starts.get_mut(&k).and_then(|v| (!v.is_empty()).then(|| v.remove(0))) {
                    out.push((s.time_ns, e.time_ns, s));
                }
            }
        }
        out.sort_by_key(|(s, e, ev)| (*s, *e, ev.seq));
        out
    }

    /// Latest `OpEnd` of an expert op for `(phase, step, layer)`.
    pub fn layer_end(&self, phase: Phase, step: usize, layer: usize) -> Option<Nanos> {
        self.events
            .iter()
            .filter(|e| {
                e.kind == EventKind::OpEnd
                    && e.op == Some(OpKind::Expert)
                    && (e.phase, e.step, e.layer) == (phase, step, layer)
            })
            .map(|e| e.time_ns)
            .max()
    }

    /// Number of resident experts right after each event time.
    pub fn peak_resident(&self) -> usize {
        let mut deltas: BTreeMap<Nanos, (usize, usize)> = BTreeMap::new();
        for e in &self.events {
            match e.kind {
                EventKind::TransferStart => deltas.entry(e.time_ns).or_default().0 += 1,
                EventKind::Evict => deltas.entry(e.time_ns).or_default().1 += 1,
                _ => {}
            }
        }
        let (mut cur, mut peak) = (0i64, 0i64);
        for (add, remove) in deltas.values() {
            cur -= *remove as i64;
            cur += *add as i64;
            peak = peak.max(cur);
        }
        peak as usize
    }

    /// Stream seriality, weight correctness, prefill fetch-once and
    /// capacity. Frees at an instant are applied before allocations.
    pub fn check(&self, slot_count: usize) -> Result<(), SimError> {
        let fail = |m: String| Err(SimError::Invariant(m));
        for stream in [Stream::Comm, Stream::Predict, Stream::Compute] {
            let iv = self.intervals(stream);
            for w in iv.windows(2) {
                if w[1].0 < w[0].1 {
                    return fail(format!(
                        "{stream:?} stream overlaps: [{}, {}) and [{}, {})",
                        w[0].0, w[0].1, w[1].0, w[1].1
                    ));
                }
            }
        }

        let mut loaded: HashMap<ExpertKey, Nanos> = HashMap::new();
        let mut prefill_transfers: HashMap<ExpertKey, usize> = HashMap::new();
        for e in &self.events {
            let Some(k) = key(e) else { continue };
            match e.kind {
                EventKind::TransferStart if e.phase == Phase::Prefill => {
                    let n = prefill_transfers.entry(k).or_default();
                    *n += 1;
                    if *n > 1 {
                        return fail(format!("prefill layer {} expert {} fetched twice", e.layer, k.3));
                    }
                }
                EventKind::TransferEnd => {
                    loaded.insert(k, e.time_ns);
                }
                EventKind::Evict => {
                    loaded.remove(&k);
                }
                EventKind::OpStart if e.op == Some(OpKind::Expert) => match loaded.get(&k) {
                    Some(&t) if t <= e.time_ns => {}
                    _ => {
                        return fail(format!(
                            "{:?} step {} layer {} expert {} computes without its weights",
                            e.phase, e.step, e.layer, k.3
                        ))
                    }
                },
                _ => {}
            }
        }

        let peak = self.peak_resident();
        if peak > slot_count {
            return fail(format!("{peak} experts resident with {slot_count} slots"));
        }
        Ok(())
    }
}
