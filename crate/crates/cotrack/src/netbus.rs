//! Simulated broadcast network between agents.
//!
//! Every message is broadcast: each recipient gets an independent copy that
//! is either dropped (Bernoulli) or delayed by a jittered latency. Delivery
//! is pull-based; agents call [`NetBus::deliver_due`] when they are ready
//! to process their inbox, which models the receive step of the tracking
//! loop. With the same seed the bus replays the exact same drops and
//! delivery times.

use crate::tracker::MessagePayload;
use crate::AgentId;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::io::Write;

/// A broadcast message in flight.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentMessage {
    pub sender: AgentId,
    /// Bus-wide monotone sequence number; breaks delivery-time ties.
    pub seq: u64,
    pub sent_at: f64,
    pub payload: MessagePayload,
}

/// Per-link latency and loss model.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LinkModel {
    /// Mean one-way latency (s).
    pub base_latency: f64,
    /// Gaussian latency jitter (s); the total latency never goes below 0.
    pub jitter_std: f64,
    /// Probability that a recipient copy is lost.
    pub drop_probability: f64,
}

impl Default for LinkModel {
    fn default() -> Self {
        LinkModel {
            base_latency: 0.020,
            jitter_std: 0.005,
            drop_probability: 0.01,
        }
    }
}

/// Counters over the lifetime of the bus. `sent` counts per-recipient
/// copies, so one broadcast among n agents adds n - 1.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NetBusStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
}

#[derive(Debug, Clone)]
struct Pending {
    delivery_at: f64,
    message: AgentMessage,
}

/// Broadcast bus between a fixed set of agents.
pub struct NetBus {
    link: LinkModel,
    /// In-flight copies per recipient (indexed by agent).
    queues: Vec<Vec<Pending>>,
    next_seq: u64,
    stats: NetBusStats,
    trace: Option<Box<dyn Write + Send>>,
}

impl std::fmt::Debug for NetBus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NetBus")
            .field("link", &self.link)
            .field("next_seq", &self.next_seq)
            .field("stats", &self.stats)
            .finish_non_exhaustive()
    }
}

impl NetBus {
    pub fn new(n_agents: usize, link: LinkModel) -> NetBus {
        NetBus {
            link,
            queues: vec![Vec::new(); n_agents],
            next_seq: 0,
            stats: NetBusStats::default(),
            trace: None,
        }
    }

    /// Write one JSON line per send/drop/deliver event to `writer`.
    pub fn set_trace(&mut self, writer: Box<dyn Write + Send>) {
        self.trace = Some(writer);
    }

    pub fn stats(&self) -> NetBusStats {
        self.stats
    }

    /// Copies queued but not yet delivered.
    pub fn in_flight(&self) -> usize {
        self.queues.iter().map(Vec::len).sum()
    }

    fn trace_line(&mut self, value: serde_json::Value) {
        if let Some(w) = &mut self.trace {
            // Trace failures must not perturb the simulation.
            let _ = serde_json::to_writer(&mut *w, &value);
            let _ = w.write_all(b"\n");
        }
    }

    /// Broadcast `payload` from `sender` to every other agent. Per
    /// recipient (in agent order) one drop draw is made, then one latency
    /// draw for surviving copies; this fixed order keeps runs replayable.
    pub fn send(
        &mut self,
        sender: AgentId,
        sent_at: f64,
        payload: MessagePayload,
        rng: &mut impl Rng,
    ) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        let jitter = Normal::new(0.0, self.link.jitter_std)
            .expect("jitter_std must be finite and non-negative");
        for recipient in 0..self.queues.len() {
            if recipient == sender.index() {
                continue;
            }
            self.stats.sent += 1;
            if rng.random_bool(self.link.drop_probability) {
                self.stats.dropped += 1;
                self.trace_line(serde_json::json!({
                    "event": "drop",
                    "t": sent_at,
                    "seq": seq,
                    "from": sender.0,
                    "to": recipient as u32,
                }));
                continue;
            }
            let latency = (self.link.base_latency + jitter.sample(rng)).max(0.0);
            let delivery_at = sent_at + latency;
            self.trace_line(serde_json::json!({
                "event": "send",
                "t": sent_at,
                "seq": seq,
                "from": sender.0,
                "to": recipient as u32,
                "delivery_at": delivery_at,
            }));
            self.queues[recipient].push(Pending {
                delivery_at,
                message: AgentMessage {
                    sender,
                    seq,
                    sent_at,
                    payload: payload.clone(),
                },
            });
        }
        seq
    }

    /// Pull every copy due for `recipient` by time `now`, ordered by
    /// (delivery time, sender, sequence). Each copy is delivered exactly
    /// once.
    pub fn deliver_due(&mut self, recipient: AgentId, now: f64) -> Vec<AgentMessage> {
        let queue = &mut self.queues[recipient.index()];
        let mut due: Vec<Pending> = Vec::new();
        let mut i = 0;
        while i < queue.len() {
            if queue[i].delivery_at <= now {
                due.push(queue.swap_remove(i));
            } else {
                i += 1;
            }
        }
        due.sort_by(|a, b| {
            a.delivery_at
                .total_cmp(&b.delivery_at)
                .then(a.message.sender.cmp(&b.message.sender))
                .then(a.message.seq.cmp(&b.message.seq))
        });
        self.stats.delivered += due.len() as u64;
        for p in &due {
            self.trace_line(serde_json::json!({
                "event": "deliver",
                "t": now,
                "seq": p.message.seq,
                "from": p.message.sender.0,
                "to": recipient.0,
                "delivery_at": p.delivery_at,
            }));
        }
        due.into_iter().map(|p| p.message).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose6D;
    use nalgebra::{Isometry3, Vector3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::{Arc, Mutex};

    fn pose_payload(x: f64) -> MessagePayload {
        let iso = Isometry3::translation(x, 0.0, 0.0);
        MessagePayload::SelfPose(Pose6D::exact(&iso))
    }

    #[test]
    fn every_copy_is_delivered_or_dropped_exactly_once() {
        let mut bus = NetBus::new(3, LinkModel::default());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in 0..200 {
            let t = k as f64 * 0.01;
            bus.send(AgentId(k % 3), t, pose_payload(k as f64), &mut rng);
        }
        let mut seen: Vec<Vec<u64>> = vec![Vec::new(); 3];
        let mut delivered = 0u64;
        for step in 0..400 {
            let now = step as f64 * 0.01;
            for a in 0..3 {
                for msg in bus.deliver_due(AgentId(a), now) {
                    assert_ne!(msg.sender, AgentId(a), "no self delivery");
                    seen[a as usize].push(msg.seq);
                    delivered += 1;
                }
            }
        }
        let stats = bus.stats();
        assert_eq!(stats.sent, 400); // 200 broadcasts x 2 recipients
        assert_eq!(stats.delivered, delivered);
        assert_eq!(stats.delivered + stats.dropped, stats.sent);
        assert_eq!(bus.in_flight(), 0);
        for per_agent in &seen {
            let mut dedup = per_agent.clone();
            dedup.sort_unstable();
            dedup.dedup();
            assert_eq!(dedup.len(), per_agent.len(), "duplicate delivery");
        }
    }

    #[test]
    fn zero_jitter_preserves_send_order() {
        let link = LinkModel {
            base_latency: 0.02,
            jitter_std: 0.0,
            drop_probability: 0.0,
        };
        let mut bus = NetBus::new(2, link);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in 0..50 {
            bus.send(AgentId(0), k as f64 * 0.005, pose_payload(0.0), &mut rng);
        }
        let msgs = bus.deliver_due(AgentId(1), 10.0);
        assert_eq!(msgs.len(), 50);
        for (k, msg) in msgs.iter().enumerate() {
            assert_eq!(msg.seq, k as u64);
            assert_eq!(msg.sent_at, k as f64 * 0.005);
        }
    }

    #[test]
    fn latency_never_negative() {
        let link = LinkModel {
            base_latency: 0.001,
            jitter_std: 1.0,
            drop_probability: 0.0,
        };
        let mut bus = NetBus::new(2, link);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            bus.send(AgentId(0), 5.0, pose_payload(0.0), &mut rng);
        }
        // Nothing may arrive before it was sent.
        assert!(bus.deliver_due(AgentId(1), 4.999999).is_empty());
        let msgs = bus.deliver_due(AgentId(1), 1e9);
        assert_eq!(msgs.len(), 500);
    }

    #[test]
    fn same_seed_replays_identically() {
        let run = |seed: u64| -> Vec<(u64, u32)> {
            let mut bus = NetBus::new(3, LinkModel::default());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for k in 0..100 {
                bus.send(AgentId(k % 3), k as f64 * 0.01, pose_payload(k as f64), &mut rng);
            }
            let mut log = Vec::new();
            for step in 0..300 {
                for a in 0..3 {
                    for m in bus.deliver_due(AgentId(a), step as f64 * 0.01) {
                        log.push((m.seq, a));
                    }
                }
            }
            log
        };
        assert_eq!(run(42), run(42));
        assert_ne!(run(42), run(43));
    }

    #[test]
    fn drop_rate_matches_bernoulli() {
        let link = LinkModel {
            base_latency: 0.02,
            jitter_std: 0.005,
            drop_probability: 0.2,
        };
        let mut bus = NetBus::new(2, link);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        for k in 0..n {
            bus.send(AgentId(0), k as f64 * 0.001, pose_payload(0.0), &mut rng);
        }
        let rate = bus.stats().dropped as f64 / n as f64;
        // Four sigma around p: 0.2 +- 4 * sqrt(0.2 * 0.8 / 10000).
        assert!((rate - 0.2).abs() < 0.016, "drop rate {rate}");
    }

    #[derive(Clone)]
    struct SharedBuf(Arc<Mutex<Vec<u8>>>);

    impl Write for SharedBuf {
        fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
            self.0.lock().unwrap().extend_from_slice(buf);
            Ok(buf.len())
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }

    #[test]
    fn trace_is_valid_jsonl() {
        let buf = SharedBuf(Arc::new(Mutex::new(Vec::new())));
        let mut bus = NetBus::new(2, LinkModel::default());
        bus.set_trace(Box::new(buf.clone()));
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for k in 0..20 {
            bus.send(AgentId(0), k as f64 * 0.01, pose_payload(0.0), &mut rng);
        }
        bus.deliver_due(AgentId(1), 10.0);
        let bytes = buf.0.lock().unwrap().clone();
        let text = String::from_utf8(bytes).unwrap();
        let mut events = 0;
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.get("event").is_some());
            assert!(v.get("seq").is_some());
            events += 1;
        }
        // 20 send-or-drop lines plus one line per delivery.
        assert!(events >= 20);
        let stats = bus.stats();
        assert_eq!(events as u64, stats.sent + stats.delivered);
    }

    #[test]
    fn payload_roundtrip_preserves_measurement() {
        use crate::tracker::DetectionMeasurement;
        let link = LinkModel {
            base_latency: 0.02,
            jitter_std: 0.0,
            drop_probability: 0.0,
        };
        let mut bus = NetBus::new(2, link);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let meas = DetectionMeasurement {
            mean: Vector3::new(1.0, 2.0, 0.85),
            covariance: nalgebra::Matrix3::identity() * 0.04,
            source: AgentId(0),
            timestamp: 1.25,
        };
        bus.send(
            AgentId(0),
            1.25,
            MessagePayload::Measurement(meas.clone()),
            &mut rng,
        );
        let got = bus.deliver_due(AgentId(1), 2.0);
        assert_eq!(got.len(), 1);
        match &got[0].payload {
            MessagePayload::Measurement(m) => assert_eq!(m, &meas),
            other => panic!("unexpected payload {other:?}"),
        }
    }
}
