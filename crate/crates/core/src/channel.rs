//! Link emulation: serialization behind the mux, a slotted fixed-capacity
//! physical layer, and seeded i.i.d. loss with uniform jitter.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mux::{Mux, MuxConfig, MuxEvent, Queued};
use crate::rng::XorShift64Star;
use crate::types::{StreamClass, Timestamp};
use crate::wire::MuxPacket;

/// Packets larger than this many slots are rejected.
pub const MAX_SLOTS_PER_PACKET: u64 = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChannelError {
    #[error("packet of {size} bytes exceeds the {limit}-byte physical limit")]
    Oversize { size: u64, limit: u64 },
    #[error("unregistered endpoint {0:?}")]
    Unregistered(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub prop_delay_us: u64,
    pub jitter_us_max: u64,
    pub loss_prob: f64,
    pub slot_us: u64,
    pub slot_capacity_bytes: u64,
    pub link_rate_bytes_per_us: f64,
    /// Overrides the session seed for this channel's impairment streams.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            prop_delay_us: 2000,
            jitter_us_max: 500,
            loss_prob: 0.0,
            slot_us: 1000,
            slot_capacity_bytes: 1250,
            link_rate_bytes_per_us: 1.25,
            seed: None,
        }
    }
}

impl ChannelConfig {
    pub fn ideal() -> ChannelConfig {
        ChannelConfig {
            jitter_us_max: 0,
            loss_prob: 0.0,
            ..ChannelConfig::default()
        }
    }

    /// Serialization time of `bytes` at the link rate, whole microseconds (rounded up).
    pub fn serialization_us(&self, bytes: usize) -> u64 {
        (bytes as f64 / self.link_rate_bytes_per_us).ceil() as u64
    }
}

/// FIFO slot allocator. A packet waits for the next slot boundary at or after
/// it is ready; packets that fit share a not-yet-started slot, larger ones
/// take `ceil(size / capacity)` fresh consecutive slots.
#[derive(Debug, Clone)]
pub struct SlottedPhy {
    slot_us: u64,
    capacity: u64,
    last_slot: Option<u64>,
    last_used: u64,
}

impl SlottedPhy {
    pub fn new(cfg: &ChannelConfig) -> SlottedPhy {
        assert!(cfg.slot_us > 0 && cfg.slot_capacity_bytes > 0);
        SlottedPhy {
            slot_us: cfg.slot_us,
            capacity: cfg.slot_capacity_bytes,
            last_slot: None,
            last_used: 0,
        }
    }

    /// Returns the end of the packet's last slot.
    pub fn transmit(&mut self, size: u64, ready: Timestamp) -> Result<Timestamp, ChannelError> {
        let limit = self.capacity * MAX_SLOTS_PER_PACKET;
        if size > limit {
            return Err(ChannelError::Oversize { size, limit });
        }
        let boundary = ready.0.div_ceil(self.slot_us) * self.slot_us;
        let n = size.div_ceil(self.capacity).max(1);
        let pending = self.last_slot.filter(|&s| s >= boundary);
        if n == 1 {
            if let Some(s) = pending {
                if self.last_used + size <= self.capacity {
                    self.last_used += size;
                    return Ok(Timestamp(s + self.slot_us));
                }
            }
        }
        let start = pending.map_or(boundary, |s| s + self.slot_us);
        self.last_slot = Some(start + (n - 1) * self.slot_us);
        self.last_used = size - (n - 1) * self.capacity;
        Ok(Timestamp(start + n * self.slot_us))
    }
}

/// One-shot form of [`SlottedPhy::transmit`] on an idle link.
pub fn phy_transmit(
    size: u64,
    ready: Timestamp,
    cfg: &ChannelConfig,
) -> Result<Timestamp, ChannelError> {
    SlottedPhy::new(cfg).transmit(size, ready)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub packet: MuxPacket,
    /// End of physical transmission.
    pub tx_ts: Timestamp,
    /// Arrival time; equals `tx_ts` for dropped packets.
    pub rx_ts: Timestamp,
    pub dropped: bool,
}

/// Loss and jitter draws from a dedicated seeded stream. Every packet
/// consumes one loss draw then one jitter draw, dropped or not.
#[derive(Debug, Clone)]
pub struct NetworkModel {
    prop_delay_us: u64,
    jitter_us_max: u64,
    loss_prob: f64,
    rng: XorShift64Star,
}

impl NetworkModel {
    pub fn new(cfg: &ChannelConfig, rng: XorShift64Star) -> NetworkModel {
        NetworkModel {
            prop_delay_us: cfg.prop_delay_us,
            jitter_us_max: cfg.jitter_us_max,
            loss_prob: cfg.loss_prob,
            rng,
        }
    }

    pub fn traverse(&mut self, packet: MuxPacket, tx_complete: Timestamp) -> Delivery {
        let dropped = self.rng.next_f64() < self.loss_prob;
        let jitter = self.rng.uniform_inclusive(self.jitter_us_max);
        Delivery {
            packet,
            tx_ts: tx_complete,
            rx_ts: if dropped {
                tx_complete
            } else {
                tx_complete.plus(self.prop_delay_us + jitter)
            },
            dropped,
        }
    }
}

pub fn network_traverse(
    packet: MuxPacket,
    tx_complete: Timestamp,
    cfg: &ChannelConfig,
    rng: &mut XorShift64Star,
) -> Delivery {
    let mut m = NetworkModel::new(cfg, rng.clone());
    let d = m.traverse(packet, tx_complete);
    *rng = m.rng;
    d
}

/// A packet handed to the link.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transmission {
    pub mux: MuxEvent,
    pub serialized_at: Timestamp,
    pub delivery: Delivery,
}

/// One direction of the shared link: mux, serializer, slotted phy, network.
/// Per-class sequence numbers are stamped as packets leave the mux.
#[derive(Debug, Clone)]
pub struct Link {
    cfg: ChannelConfig,
    mux: Mux,
    serializer_free: Timestamp,
    phy: SlottedPhy,
    net: NetworkModel,
    next_seq: [u32; StreamClass::COUNT],
}

impl Link {
    pub fn new(cfg: &ChannelConfig, mux: &MuxConfig, rng: XorShift64Star) -> Link {
        Link {
            cfg: *cfg,
            mux: Mux::from_config(mux),
            serializer_free: Timestamp::ZERO,
            phy: SlottedPhy::new(cfg),
            net: NetworkModel::new(cfg, rng),
            next_seq: [0; StreamClass::COUNT],
        }
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.cfg
    }

    pub fn mux(&self) -> &Mux {
        &self.mux
    }

    /// Queues a packet; returns the packet evicted by overflow, if any.
    pub fn offer(&mut self, packet: MuxPacket, ts: Timestamp) -> Option<Queued> {
        self.mux.enqueue(packet, ts)
    }

    pub fn is_idle(&self, ts: Timestamp) -> bool {
        self.serializer_free <= ts
    }

    pub fn busy_until(&self) -> Timestamp {
        self.serializer_free
    }

    pub fn has_backlog(&self) -> bool {
        !self.mux.is_empty()
    }

    /// Starts the next packet if the serializer is idle at `ts`.
    pub fn poll(&mut self, ts: Timestamp) -> Result<Option<Transmission>, ChannelError> {
        if !self.is_idle(ts) {
            return Ok(None);
        }
        let Some(mut ev) = self.mux.dequeue_next(ts) else {
            return Ok(None);
        };
        let c = ev.packet.class.index();
        ev.packet.seq = self.next_seq[c];
        self.next_seq[c] = self.next_seq[c].wrapping_add(1);
        let len = ev.packet.wire_len();
        let serialized_at = ts.plus(self.cfg.serialization_us(len));
        self.serializer_free = serialized_at;
        let tx_complete = self.phy.transmit(len as u64, serialized_at)?;
        let delivery = self.net.traverse(ev.packet.clone(), tx_complete);
        Ok(Some(Transmission {
            mux: ev,
            serialized_at,
            delivery,
        }))
    }
}

/// In-process datagram fabric for virtual-time runs.
#[derive(Debug, Default)]
pub struct LoopbackNet {
    inboxes: BTreeMap<String, BinaryHeap<Reverse<(Timestamp, u64, Vec<u8>)>>>,
    order: u64,
}

impl LoopbackNet {
    pub fn new() -> LoopbackNet {
        LoopbackNet::default()
    }

    pub fn register(&mut self, name: &str) {
        self.inboxes.entry(name.to_string()).or_default();
    }

    /// Delivers `bytes` to `to` at the delivery's `rx_ts`; dropped deliveries vanish.
    pub fn send(
        &mut self,
        from: &str,
        to: &str,
        bytes: Vec<u8>,
        d: &Delivery,
    ) -> Result<(), ChannelError> {
        if !self.inboxes.contains_key(from) {
            return Err(ChannelError::Unregistered(from.to_string()));
        }
        let inbox = self
            .inboxes
            .get_mut(to)
            .ok_or_else(|| ChannelError::Unregistered(to.to_string()))?;
        if !d.dropped {
            self.order += 1;
            inbox.push(Reverse((d.rx_ts, self.order, bytes)));
        }
        Ok(())
    }

    /// Datagrams that have arrived by `now`, in arrival order.
    pub fn recv_ready(
        &mut self,
        to: &str,
        now: Timestamp,
    ) -> Result<Vec<(Timestamp, Vec<u8>)>, ChannelError> {
        let inbox = self
            .inboxes
            .get_mut(to)
            .ok_or_else(|| ChannelError::Unregistered(to.to_string()))?;
        let mut out = Vec::new();
        while inbox.peek().is_some_and(|Reverse((t, _, _))| *t <= now) {
            let Reverse((t, _, b)) = inbox.pop().unwrap();
            out.push((t, b));
        }
        Ok(out)
    }

    pub fn next_arrival(&self, to: &str) -> Option<Timestamp> {
        self.inboxes.get(to)?.peek().map(|Reverse((t, _, _))| *t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::{decode_packet, encode_packet};

    fn cfg() -> ChannelConfig {
        ChannelConfig {
            prop_delay_us: 0,
            jitter_us_max: 0,
            loss_prob: 0.0,
            slot_us: 1000,
            slot_capacity_bytes: 1250,
            link_rate_bytes_per_us: 1.0,
            seed: None,
        }
    }

    fn pkt(seq: u32) -> MuxPacket {
        MuxPacket::new(StreamClass::Haptic, seq, Timestamp(0), vec![1, 2, 3])
    }

    #[test]
    fn waits_for_next_slot() {
        assert_eq!(
            phy_transmit(48, Timestamp(300), &cfg()).unwrap(),
            Timestamp(2000)
        );
    }

    #[test]
    fn ready_on_boundary_costs_one_slot() {
        assert_eq!(
            phy_transmit(48, Timestamp(3000), &cfg()).unwrap(),
            Timestamp(4000)
        );
    }

    #[test]
    fn large_packet_spans_slots() {
        assert_eq!(
            phy_transmit(2600, Timestamp(0), &cfg()).unwrap(),
            Timestamp(3000)
        );
        assert!(matches!(
            phy_transmit(1250 * 64 + 1, Timestamp(0), &cfg()),
            Err(ChannelError::Oversize { .. })
        ));
    }

    #[test]
    fn slot_sharing_and_fifo() {
        let mut phy = SlottedPhy::new(&cfg());
        assert_eq!(phy.transmit(1000, Timestamp(100)).unwrap(), Timestamp(2000));
        // fits the remaining 250 bytes of the same slot
        assert_eq!(phy.transmit(200, Timestamp(200)).unwrap(), Timestamp(2000));
        // does not fit: next slot
        assert_eq!(phy.transmit(100, Timestamp(300)).unwrap(), Timestamp(3000));
        // multi-slot packet takes fresh slots after the pending one
        assert_eq!(phy.transmit(2000, Timestamp(400)).unwrap(), Timestamp(5000));
        // its tail slot has 500 bytes free
        assert_eq!(phy.transmit(500, Timestamp(500)).unwrap(), Timestamp(5000));
        // much later: idle link, fresh boundary
        assert_eq!(phy.transmit(10, Timestamp(9500)).unwrap(), Timestamp(11000));
    }

    #[test]
    fn degenerate_loss() {
        let mut r = XorShift64Star::new(1);
        let c0 = ChannelConfig {
            loss_prob: 0.0,
            ..cfg()
        };
        let c1 = ChannelConfig {
            loss_prob: 1.0,
            ..cfg()
        };
        for i in 0..1000 {
            assert!(!network_traverse(pkt(i), Timestamp(0), &c0, &mut r).dropped);
            assert!(network_traverse(pkt(i), Timestamp(0), &c1, &mut r).dropped);
        }
    }

    // Delivered subset for seed 42, loss 0.5, 10 packets; frozen from an
    // independent transcription of the generator.
    #[test]
    fn golden_drop_sequence() {
        let c = ChannelConfig {
            loss_prob: 0.5,
            jitter_us_max: 100,
            ..cfg()
        };
        let mut r = XorShift64Star::new(42);
        let dropped: Vec<bool> = (0..10)
            .map(|i| network_traverse(pkt(i), Timestamp(0), &c, &mut r).dropped)
            .collect();
        assert_eq!(dropped, GOLDEN_DROPS_SEED42);
    }

    pub(crate) const GOLDEN_DROPS_SEED42: [bool; 10] = [
        true, true, false, true, false, true, true, true, false, false,
    ];

    #[test]
    fn rx_never_precedes_prop_delay() {
        let c = ChannelConfig {
            prop_delay_us: 700,
            jitter_us_max: 300,
            loss_prob: 0.2,
            ..cfg()
        };
        let mut r = XorShift64Star::new(3);
        for i in 0..1000 {
            let d = network_traverse(pkt(i), Timestamp(i as u64), &c, &mut r);
            if !d.dropped {
                assert!(d.rx_ts.0 >= d.tx_ts.0 + 700 && d.rx_ts.0 <= d.tx_ts.0 + 1000);
            }
        }
    }

    #[test]
    fn link_stamps_per_class_seq() {
        let mut link = Link::new(&cfg(), &MuxConfig::default(), XorShift64Star::new(0));
        for _ in 0..3 {
            link.offer(pkt(99), Timestamp(0));
        }
        link.offer(
            MuxPacket::new(StreamClass::Video, 99, Timestamp(0), vec![0; 10]),
            Timestamp(0),
        );
        let mut seqs = Vec::new();
        let mut t = Timestamp(0);
        while link.has_backlog() {
            t = t.max(link.busy_until());
            let tx = link.poll(t).unwrap().unwrap();
            seqs.push((tx.mux.packet.class, tx.mux.packet.seq));
            assert_eq!(tx.serialized_at, t.plus(tx.mux.packet.wire_len() as u64));
        }
        assert_eq!(
            seqs,
            vec![
                (StreamClass::Haptic, 0),
                (StreamClass::Haptic, 1),
                (StreamClass::Haptic, 2),
                (StreamClass::Video, 0)
            ]
        );
    }

    #[test]
    fn loopback_identity_path() {
        let c = ChannelConfig {
            prop_delay_us: 1500,
            ..cfg()
        };
        let mut net = LoopbackNet::new();
        net.register("a");
        net.register("b");
        let mut r = XorShift64Star::new(0);
        let p = pkt(0);
        let d = network_traverse(p.clone(), Timestamp(2000), &c, &mut r);
        assert_eq!(d.rx_ts, Timestamp(3500));
        net.send("a", "b", encode_packet(&p).unwrap(), &d).unwrap();
        assert!(net.recv_ready("b", Timestamp(3499)).unwrap().is_empty());
        let got = net.recv_ready("b", Timestamp(3500)).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(decode_packet(&got[0].1).unwrap(), p);
        assert_eq!(
            net.send("a", "zz", vec![], &d),
            Err(ChannelError::Unregistered("zz".into()))
        );
    }

    #[test]
    fn loopback_exposes_jitter_reordering() {
        let c = ChannelConfig {
            prop_delay_us: 100,
            jitter_us_max: 5000,
            ..cfg()
        };
        let mut net = LoopbackNet::new();
        net.register("a");
        net.register("b");
        let mut r = XorShift64Star::new(11);
        for i in 0..20u32 {
            let p = pkt(i);
            let d = network_traverse(p.clone(), Timestamp(i as u64 * 100), &c, &mut r);
            net.send("a", "b", encode_packet(&p).unwrap(), &d).unwrap();
        }
        let seqs: Vec<u32> = net
            .recv_ready("b", Timestamp(u64::MAX))
            .unwrap()
            .iter()
            .map(|(_, b)| decode_packet(b).unwrap().seq)
            .collect();
        assert_eq!(seqs.len(), 20);
        assert!(
            seqs.windows(2).any(|w| w[0] > w[1]),
            "expected a swap: {seqs:?}"
        );
    }

    #[test]
    fn same_seed_same_log() {
        let c = ChannelConfig {
            loss_prob: 0.3,
            jitter_us_max: 900,
            ..cfg()
        };
        let run = || {
            let mut r = XorShift64Star::new(77);
            (0..200)
                .map(|i| network_traverse(pkt(i), Timestamp(i as u64), &c, &mut r))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
