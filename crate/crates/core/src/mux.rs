//! Class multiplexer in front of the shared link.
//!
//! One FIFO queue per [`StreamClass`]; the scheme only decides which queue's
//! head goes next. Service is non-preemptive: the caller dequeues only when
//! the link is idle.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::metrics::Summary;
use crate::types::{StreamClass, Timestamp};
use crate::wire::MuxPacket;

pub const DEFAULT_CAPACITY: usize = 4096;
pub const DEFAULT_QUANTUM: u32 = 1500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Fifo,
    StrictPriority,
    Drr,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MuxScheme {
    /// Global arrival order; simultaneous arrivals by ascending class code.
    Fifo,
    /// Lowest class code first: Control > Haptic > Video > Metrics.
    StrictPriority,
    /// Deficit round robin over classes in code order, quanta in bytes.
    Drr { quanta: [u32; StreamClass::COUNT] },
}

impl MuxScheme {
    pub fn drr(haptic: u32, video: u32) -> MuxScheme {
        let mut quanta = [DEFAULT_QUANTUM; StreamClass::COUNT];
        quanta[StreamClass::Haptic.index()] = haptic;
        quanta[StreamClass::Video.index()] = video;
        MuxScheme::Drr { quanta }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MuxConfig {
    pub scheme: SchemeKind,
    pub quantum_haptic: u32,
    pub quantum_video: u32,
    pub capacity_per_class: usize,
}

impl Default for MuxConfig {
    fn default() -> Self {
        MuxConfig {
            scheme: SchemeKind::StrictPriority,
            quantum_haptic: 256,
            quantum_video: DEFAULT_QUANTUM,
            capacity_per_class: DEFAULT_CAPACITY,
        }
    }
}

impl MuxConfig {
    pub fn scheme(&self) -> MuxScheme {
        match self.scheme {
            SchemeKind::Fifo => MuxScheme::Fifo,
            SchemeKind::StrictPriority => MuxScheme::StrictPriority,
            SchemeKind::Drr => MuxScheme::drr(self.quantum_haptic, self.quantum_video),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Queued {
    pub packet: MuxPacket,
    pub enqueue_ts: Timestamp,
}

/// A packet leaving the mux.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MuxEvent {
    pub packet: MuxPacket,
    pub enqueue_ts: Timestamp,
    pub dequeue_ts: Timestamp,
}

impl MuxEvent {
    pub fn delay_us(&self) -> u64 {
        self.dequeue_ts.since(self.enqueue_ts)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassCounters {
    pub enqueued: u64,
    pub dequeued: u64,
    pub dropped: u64,
}

#[derive(Debug, Clone)]
pub struct Mux {
    scheme: MuxScheme,
    capacity: usize,
    queues: [VecDeque<Queued>; StreamClass::COUNT],
    counters: [ClassCounters; StreamClass::COUNT],
    deficits: [u64; StreamClass::COUNT],
    cursor: usize,
    // quantum already granted to `cursor` on this visit
    granted: bool,
}

impl Mux {
    pub fn new(scheme: MuxScheme, capacity: usize) -> Mux {
        assert!(capacity > 0, "queue capacity must be positive");
        if let MuxScheme::Drr { quanta } = &scheme {
            assert!(quanta.iter().all(|&q| q > 0), "DRR quanta must be positive");
        }
        Mux {
            scheme,
            capacity,
            queues: Default::default(),
            counters: Default::default(),
            deficits: [0; StreamClass::COUNT],
            cursor: 0,
            granted: false,
        }
    }

    pub fn from_config(cfg: &MuxConfig) -> Mux {
        Mux::new(cfg.scheme(), cfg.capacity_per_class)
    }

    pub fn scheme(&self) -> &MuxScheme {
        &self.scheme
    }

    /// Appends to the class queue. On overflow the oldest packet of that class
    /// is dropped and returned.
    pub fn enqueue(&mut self, packet: MuxPacket, ts: Timestamp) -> Option<Queued> {
        let c = packet.class.index();
        self.counters[c].enqueued += 1;
        let dropped = if self.queues[c].len() >= self.capacity {
            self.counters[c].dropped += 1;
            self.queues[c].pop_front()
        } else {
            None
        };
        self.queues[c].push_back(Queued {
            packet,
            enqueue_ts: ts,
        });
        dropped
    }

    pub fn dequeue_next(&mut self, ts: Timestamp) -> Option<MuxEvent> {
        let c = match self.scheme {
            MuxScheme::Fifo => self.pick_fifo()?,
            MuxScheme::StrictPriority => self.queues.iter().position(|q| !q.is_empty())?,
            MuxScheme::Drr { quanta } => self.pick_drr(&quanta)?,
        };
        let q = self.queues[c]
            .pop_front()
            .expect("picked queue is non-empty");
        self.counters[c].dequeued += 1;
        Some(MuxEvent {
            packet: q.packet,
            enqueue_ts: q.enqueue_ts,
            dequeue_ts: ts,
        })
    }

    fn pick_fifo(&self) -> Option<usize> {
        (0..StreamClass::COUNT)
            .filter_map(|c| self.queues[c].front().map(|q| (q.enqueue_ts, c)))
            .min()
            .map(|(_, c)| c)
    }

    fn pick_drr(&mut self, quanta: &[u32; StreamClass::COUNT]) -> Option<usize> {
        if self.is_empty() {
            return None;
        }
        loop {
            let c = self.cursor;
            match self.queues[c].front() {
                None => {
                    self.deficits[c] = 0;
                    self.next_class();
                }
                Some(head) => {
                    if !self.granted {
                        self.deficits[c] += quanta[c] as u64;
                        self.granted = true;
                    }
                    let size = head.packet.wire_len() as u64;
                    if size <= self.deficits[c] {
                        self.deficits[c] -= size;
                        if self.queues[c].len() == 1 {
                            self.deficits[c] = 0;
                            self.next_class();
                        }
                        return Some(c);
                    }
                    self.next_class();
                }
            }
        }
    }

    fn next_class(&mut self) {
        self.cursor = (self.cursor + 1) % StreamClass::COUNT;
        self.granted = false;
    }

    pub fn is_empty(&self) -> bool {
        self.queues.iter().all(VecDeque::is_empty)
    }

    pub fn queued(&self, class: StreamClass) -> usize {
        self.queues[class.index()].len()
    }

    pub fn counters(&self, class: StreamClass) -> ClassCounters {
        self.counters[class.index()]
    }
}

/// Per-class mux delay summaries; classes without events are omitted.
pub fn mux_delay_stats(events: &[MuxEvent]) -> BTreeMap<StreamClass, Summary> {
    let mut by_class: BTreeMap<StreamClass, Vec<u64>> = BTreeMap::new();
    for e in events {
        by_class
            .entry(e.packet.class)
            .or_default()
            .push(e.delay_us());
    }
    by_class
        .into_iter()
        .filter_map(|(c, v)| Summary::of(&v).map(|s| (c, s)))
        .collect()
}
