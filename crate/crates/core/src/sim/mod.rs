//! Deterministic discrete-event engine.
//!
//! Virtual time is an integer millisecond clock. Events fire in
//! `(fire_time, sequence)` order; the sequence is a global insertion counter
//! so equal-time events keep their scheduling order.

mod dist;
mod link;
mod rng;

pub use dist::{DistError, LatencyDist, WeightedDist};
pub use link::{Delivery, LinkModel};
pub use rng::RngStream;

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::io::Write;

use serde::Serialize;

/// Virtual milliseconds.
pub type Millis = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct ComponentId(pub u32);

/// Opaque handle returned by [`Simulation::schedule`]; cancels one event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventHandle(u64);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimEvent<E> {
    pub fire_time: Millis,
    pub sequence: u64,
    pub target: ComponentId,
    pub payload: E,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("event scheduled in the past: fire_time {fire_time} < clock {clock}")]
    InThePast { fire_time: Millis, clock: Millis },
    #[error("run_until target {target} is before the clock {clock}")]
    RewindRequested { target: Millis, clock: Millis },
}

/// Describes an event payload for the structured run log.
pub trait TraceEvent {
    fn kind(&self) -> &'static str;
    fn detail(&self) -> String {
        String::new()
    }
}

struct Queued<E>(SimEvent<E>);

impl<E> PartialEq for Queued<E> {
    fn eq(&self, other: &Self) -> bool {
        self.0.sequence == other.0.sequence
    }
}

impl<E> Eq for Queued<E> {}

impl<E> PartialOrd for Queued<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Queued<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap.
        other
            .0
            .fire_time
            .cmp(&self.0.fire_time)
            .then(other.0.sequence.cmp(&self.0.sequence))
    }
}

#[derive(Serialize)]
struct TraceRecord<'a> {
    time_ms: Millis,
    component: &'a str,
    event_kind: &'a str,
    detail: String,
}

pub struct Simulation<E> {
    clock: Millis,
    next_sequence: u64,
    queue: BinaryHeap<Queued<E>>,
    cancelled: BTreeSet<u64>,
    components: Vec<String>,
    fired: u64,
    trace: Option<Box<dyn Write>>,
}

impl<E> Default for Simulation<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Simulation<E> {
    pub fn new() -> Self {
        Self {
            clock: 0,
            next_sequence: 0,
            queue: BinaryHeap::new(),
            cancelled: BTreeSet::new(),
            components: Vec::new(),
            fired: 0,
            trace: None,
        }
    }

    /// Enable the newline-delimited JSON run log.
    pub fn enable_trace(&mut self, sink: Box<dyn Write>) {
        self.trace = Some(sink);
    }

    pub fn register(&mut self, name: impl Into<String>) -> ComponentId {
        self.components.push(name.into());
        ComponentId(self.components.len() as u32 - 1)
    }

    pub fn component_name(&self, id: ComponentId) -> &str {
        self.components
            .get(id.0 as usize)
            .map(String::as_str)
            .unwrap_or("?")
    }

    pub fn now(&self) -> Millis {
        self.clock
    }

    pub fn fired_count(&self) -> u64 {
        self.fired
    }

    pub fn pending(&self) -> usize {
        self.queue.len() - self.cancelled.len()
    }

    pub fn is_idle(&self) -> bool {
        self.pending() == 0
    }

    pub fn schedule(
        &mut self,
        fire_time: Millis,
        target: ComponentId,
        payload: E,
    ) -> Result<EventHandle, SimError> {
        if fire_time < self.clock {
            return Err(SimError::InThePast {
                fire_time,
                clock: self.clock,
            });
        }
        let sequence = self.next_sequence;
        self.next_sequence += 1;
        self.queue.push(Queued(SimEvent {
            fire_time,
            sequence,
            target,
            payload,
        }));
        Ok(EventHandle(sequence))
    }

    /// Schedule `delay` milliseconds from now. Never fails.
    pub fn schedule_in(&mut self, delay: Millis, target: ComponentId, payload: E) -> EventHandle {
        let at = self.clock + delay;
        self.schedule(at, target, payload)
            .expect("relative schedule is never in the past")
    }

    /// Returns true if the event was still pending.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        if handle.0 >= self.next_sequence {
            return false;
        }
        if !self.queue.iter().any(|q| q.0.sequence == handle.0) {
            return false;
        }
        self.cancelled.insert(handle.0)
    }

    /// Send `payload` over `link`; schedules delivery unless the link drops it.
    pub fn send(
        &mut self,
        target: ComponentId,
        payload: E,
        link: &LinkModel,
        rng: &mut RngStream,
    ) -> Delivery {
        let outcome = link.deliver(self.clock, rng);
        if let Delivery::DeliveredAt(at) = outcome {
            self.schedule(at, target, payload)
                .expect("delivery time is never in the past");
        }
        outcome
    }

    pub fn peek_time(&mut self) -> Option<Millis> {
        self.skip_cancelled();
        self.queue.peek().map(|q| q.0.fire_time)
    }

    fn skip_cancelled(&mut self) {
        while let Some(top) = self.queue.peek() {
            if self.cancelled.remove(&top.0.sequence) {
                self.queue.pop();
            } else {
                break;
            }
        }
    }
}

impl<E: TraceEvent> Simulation<E> {
    /// Pop the next event with `fire_time <= t_end`, advancing the clock to it.
    pub fn pop_until(&mut self, t_end: Millis) -> Option<SimEvent<E>> {
        self.skip_cancelled();
        let due = self.queue.peek().is_some_and(|q| q.0.fire_time <= t_end);
        if !due {
            return None;
        }
        let Queued(event) = self.queue.pop().expect("peeked");
        debug_assert!(event.fire_time >= self.clock, "clock went backwards");
        self.clock = event.fire_time;
        self.fired += 1;
        if let Some(sink) = self.trace.as_mut() {
            let name = self
                .components
                .get(event.target.0 as usize)
                .map(String::as_str)
                .unwrap_or("?");
            let record = TraceRecord {
                time_ms: event.fire_time,
                component: name,
                event_kind: event.payload.kind(),
                detail: event.payload.detail(),
            };
            // The run log is diagnostic output; a failing sink must not
            // perturb the simulation itself.
            if let Ok(line) = serde_json::to_string(&record) {
                let _ = writeln!(sink, "{line}");
            }
        }
        Some(event)
    }

    /// Process every event with `fire_time <= t_end`, then leave the clock at
    /// `t_end`. Returns the final clock.
    pub fn run_until<F>(&mut self, t_end: Millis, mut handler: F) -> Result<Millis, SimError>
    where
        F: FnMut(&mut Self, SimEvent<E>),
    {
        if t_end < self.clock {
            return Err(SimError::RewindRequested {
                target: t_end,
                clock: self.clock,
            });
        }
        while let Some(event) = self.pop_until(t_end) {
            handler(self, event);
        }
        self.clock = t_end;
        Ok(self.clock)
    }

    /// Advance the clock without firing anything (used when nothing is due).
    pub fn advance_to(&mut self, t: Millis) {
        if t > self.clock {
            self.clock = t;
        }
    }

    pub fn flush_trace(&mut self) {
        if let Some(sink) = self.trace.as_mut() {
            let _ = sink.flush();
        }
    }
}
