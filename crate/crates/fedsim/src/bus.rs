//! In-process transport between the server and the agents.
//!
//! Messages are queued with [`MessageBus::enqueue`] and handed over with
//! [`MessageBus::deliver`]; both steps are appended to an event log so tests
//! can audit the protocol.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Endpoint {
    Server,
    Agent(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Message {
    /// Server to agent: the current global iterate.
    Broadcast { q: f64 },
    /// Agent to server: iterate change and mean local iterate.
    Update { delta_q: f64, delta_q_bar: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub round: usize,
    pub from: Endpoint,
    pub to: Endpoint,
    pub message: Message,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Sent,
    Delivered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportEvent {
    pub round: usize,
    pub from: Endpoint,
    pub to: Endpoint,
    pub kind: EventKind,
}

#[derive(Debug, Default)]
pub struct MessageBus {
    queue: VecDeque<Envelope>,
    log: Vec<TransportEvent>,
    sent_per_round: BTreeMap<usize, usize>,
}

impl MessageBus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enqueue(&mut self, envelope: Envelope) {
        self.log.push(TransportEvent {
            round: envelope.round,
            from: envelope.from,
            to: envelope.to,
            kind: EventKind::Sent,
        });
        *self.sent_per_round.entry(envelope.round).or_default() += 1;
        self.queue.push_back(envelope);
    }

    /// Removes and returns every queued message addressed to `to`, in send
    /// order.
    pub fn deliver(&mut self, to: Endpoint) -> Vec<Envelope> {
        let (mine, rest): (Vec<Envelope>, Vec<Envelope>) =
            self.queue.drain(..).partition(|e| e.to == to);
        self.queue = rest.into();
        for e in &mine {
            self.log.push(TransportEvent {
                round: e.round,
                from: e.from,
                to: e.to,
                kind: EventKind::Delivered,
            });
        }
        mine
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn log(&self) -> &[TransportEvent] {
        &self.log
    }

    /// Messages sent during `round`.
    pub fn sent_in_round(&self, round: usize) -> usize {
        self.sent_per_round.get(&round).copied().unwrap_or(0)
    }

    /// Messages sent during `round` from `from` to `to`.
    pub fn sent_between(&self, round: usize, from: Endpoint, to: Endpoint) -> usize {
        self.log
            .iter()
            .filter(|e| e.round == round && e.kind == EventKind::Sent && e.from == from && e.to == to)
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deliver_routes_by_recipient() {
        let mut bus = MessageBus::new();
        for a in 0..3 {
            bus.enqueue(Envelope {
                round: 0,
                from: Endpoint::Server,
                to: Endpoint::Agent(a),
                message: Message::Broadcast { q: a as f64 },
            });
        }
        let got = bus.deliver(Endpoint::Agent(1));
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].message, Message::Broadcast { q: 1.0 });
        assert_eq!(bus.pending(), 2);
        assert!(bus.deliver(Endpoint::Server).is_empty());
        assert_eq!(bus.sent_in_round(0), 3);
        assert_eq!(bus.log().len(), 4);
    }
}
