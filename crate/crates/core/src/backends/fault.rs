//! Fault injection for text backends.
//!
//! [`FaultyText`] wraps another backend and, per task, replays a queue of
//! scripted faults before falling through to the wrapped backend. Standing
//! faults repeat on every call for their task.

use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex};

use super::{BackendError, Task, TextBackend, TextRequest};

#[derive(Debug, Clone, PartialEq)]
pub enum Fault {
    /// Return this text instead of calling the wrapped backend.
    Respond(String),
    Error(BackendError),
    PassThrough,
}

impl Fault {
    /// An extraction payload relating `known` to an entity that is never
    /// declared.
    pub fn unknown_entity_edge(known: &str, missing: &str) -> Self {
        Fault::Respond(fence(&serde_json::json!({
            "entities": [],
            "relations": [{"source": known, "relation": "NEAR", "target": missing}],
            "attribute_changes": [],
        })))
    }

    /// An extraction payload declaring two locations inside each other.
    pub fn containment_cycle(a: &str, b: &str) -> Self {
        Fault::Respond(fence(&serde_json::json!({
            "entities": [
                {"name": a, "node_type": "location", "attributes": {}},
                {"name": b, "node_type": "location", "attributes": {}},
            ],
            "relations": [
                {"source": a, "relation": "INSIDE", "target": b},
                {"source": b, "relation": "INSIDE", "target": a},
            ],
            "attribute_changes": [],
        })))
    }

    pub fn garbage() -> Self {
        Fault::Respond("```json\n{\"entities\": [\u{0}, }}}\n```".into())
    }

    pub fn no_fence() -> Self {
        Fault::Respond("I could not find anything to extract.".into())
    }
}

fn fence(value: &serde_json::Value) -> String {
    format!("Updates follow.\n```json\n{value}\n```\n")
}

pub struct FaultyText {
    inner: Arc<dyn TextBackend>,
    queued: Mutex<BTreeMap<TaskKey, VecDeque<Fault>>>,
    standing: Mutex<BTreeMap<TaskKey, Fault>>,
    calls: AtomicU32,
    task_calls: Mutex<BTreeMap<TaskKey, u32>>,
}

type TaskKey = u8;

fn key(task: Task) -> TaskKey {
    task as u8
}

impl FaultyText {
    pub fn new(inner: Arc<dyn TextBackend>) -> Self {
        Self {
            inner,
            queued: Mutex::default(),
            standing: Mutex::default(),
            calls: AtomicU32::new(0),
            task_calls: Mutex::default(),
        }
    }

    /// Queues a one-shot fault for the next call of `task`.
    pub fn push(&self, task: Task, fault: Fault) {
        self.queued
            .lock()
            .expect("fault lock")
            .entry(key(task))
            .or_default()
            .push_back(fault);
    }

    /// Applies `fault` to every call of `task` once the queue is empty.
    pub fn always(&self, task: Task, fault: Fault) {
        self.standing
            .lock()
            .expect("fault lock")
            .insert(key(task), fault);
    }

    pub fn calls(&self) -> u32 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn calls_for(&self, task: Task) -> u32 {
        self.task_calls
            .lock()
            .expect("fault lock")
            .get(&key(task))
            .copied()
            .unwrap_or(0)
    }
}

impl TextBackend for FaultyText {
    fn complete_text(&self, request: &TextRequest) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        *self
            .task_calls
            .lock()
            .expect("fault lock")
            .entry(key(request.task))
            .or_default() += 1;
        let queued = self
            .queued
            .lock()
            .expect("fault lock")
            .get_mut(&key(request.task))
            .and_then(VecDeque::pop_front);
        let fault = queued.or_else(|| {
            self.standing
                .lock()
                .expect("fault lock")
                .get(&key(request.task))
                .cloned()
        });
        match fault {
            Some(Fault::Respond(text)) => Ok(text),
            Some(Fault::Error(e)) => Err(e),
            Some(Fault::PassThrough) | None => self.inner.complete_text(request),
        }
    }
}
