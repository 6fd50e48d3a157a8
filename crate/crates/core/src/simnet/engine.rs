//! Event queue and event log.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;

use serde::Serialize;
use sha2::{Digest as _, Sha256};

use crate::ledger::Digest;

struct Scheduled<E> {
    fire_at_ms: u64,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.fire_at_ms, self.seq) == (other.fire_at_ms, other.seq)
    }
}

impl<E> Eq for Scheduled<E> {}

impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Scheduled<E> {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        (other.fire_at_ms, other.seq).cmp(&(self.fire_at_ms, self.seq))
    }
}

/// Events come out in (fire_at_ms, seq) order; seq is assigned at
/// scheduling time, so equal-time events keep their scheduling order.
pub struct EventQueue<E> {
    heap: BinaryHeap<Scheduled<E>>,
    next_seq: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        EventQueue { heap: BinaryHeap::new(), next_seq: 0 }
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn schedule(&mut self, fire_at_ms: u64, event: E) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Scheduled { fire_at_ms, seq, event });
        seq
    }

    /// Next event as (fire_at_ms, seq, event).
    pub fn pop(&mut self) -> Option<(u64, u64, E)> {
        self.heap.pop().map(|s| (s.fire_at_ms, s.seq, s.event))
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

/// Newline-delimited JSON log. Every line is folded into a running
/// SHA-256, which is the run's determinism digest. Lines are kept in
/// memory only when asked for.
pub struct EventLog {
    hasher: Sha256,
    lines: u64,
    keep: Option<Vec<u8>>,
    scratch: Vec<u8>,
}

impl EventLog {
    pub fn new(keep_lines: bool) -> Self {
        EventLog { hasher: Sha256::new(), lines: 0, keep: keep_lines.then(Vec::new), scratch: Vec::with_capacity(256) }
    }

    pub fn record<T: Serialize>(&mut self, line: &T) {
        self.scratch.clear();
        serde_json::to_writer(&mut self.scratch, line).expect("log records serialize");
        self.scratch.push(b'\n');
        self.hasher.update(&self.scratch);
        if let Some(buf) = &mut self.keep {
            buf.write_all(&self.scratch).expect("vec write");
        }
        self.lines += 1;
    }

    pub fn len(&self) -> u64 {
        self.lines
    }

    pub fn is_empty(&self) -> bool {
        self.lines == 0
    }

    /// Retained NDJSON bytes, if kept.
    pub fn bytes(&self) -> Option<&[u8]> {
        self.keep.as_deref()
    }

    pub fn digest(&self) -> Digest {
        Digest::from_bytes(self.hasher.clone().finalize().into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_then_seq_order() {
        let mut q = EventQueue::new();
        q.schedule(10, "c");
        q.schedule(5, "a");
        q.schedule(10, "d");
        q.schedule(5, "b");
        let order: Vec<_> = std::iter::from_fn(|| q.pop()).map(|(_, _, e)| e).collect();
        assert_eq!(order, ["a", "b", "c", "d"]);
    }

    #[test]
    fn log_digest_is_sha256_of_bytes() {
        #[derive(Serialize)]
        struct L {
            t: u64,
            b: &'static str,
        }
        let mut log = EventLog::new(true);
        log.record(&L { t: 1, b: "x" });
        log.record(&L { t: 2, b: "y" });
        let bytes = log.bytes().unwrap();
        assert_eq!(bytes, b"{\"t\":1,\"b\":\"x\"}\n{\"t\":2,\"b\":\"y\"}\n");
        assert_eq!(log.digest(), crate::ledger::sha256(bytes));
        assert_eq!(log.len(), 2);
    }
}
