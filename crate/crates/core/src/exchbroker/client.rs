//! Producer and consumer lanes over an [`ExchBroker`] for the load generator.

use std::time::Duration;

use super::{
    Binding, Channel, ConsumeMode, ConsumeOptions, ConsumerHandle, ExchBroker, ExchError, Exchange, ExchangeKind,
    QueueSpec,
};
use crate::broker::{Broker, BrokerError, ConsumerLane, Delivered, EngineKind, ProducerLane};
use crate::message::Message;
use crate::qos::ConfirmPolicy;

pub const EXCHANGE: &str = "bench";
const VHOST: &str = "/";

#[derive(Clone, Debug)]
pub struct ExchLanesConfig {
    /// Number of queues; producer `i` feeds queue `i % queues` and consumer
    /// `j` drains queue `j % queues`.
    pub queues: usize,
    /// Durable queues, persistent publishes, confirms and manual acks.
    /// Otherwise: transient queues and auto-ack.
    pub at_least_once: bool,
    pub confirm_window: i64,
    pub prefetch: u32,
    pub queue_template: QueueSpec,
}

impl Default for ExchLanesConfig {
    fn default() -> Self {
        ExchLanesConfig {
            queues: 1,
            at_least_once: false,
            confirm_window: -1,
            prefetch: 1000,
            queue_template: QueueSpec::new("q"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExchLanes {
    pub broker: ExchBroker,
    cfg: ExchLanesConfig,
}

pub fn queue_name(i: usize) -> String {
    format!("bench-q{i}")
}

fn to_broker_error(e: ExchError) -> BrokerError {
    match e {
        ExchError::FlowBlocked | ExchError::WindowFull => BrokerError::Backpressure,
        ExchError::BrokerDown(s) => BrokerError::Down(s),
        other => BrokerError::Failed(other.to_string()),
    }
}

impl ExchLanes {
    pub fn new(broker: ExchBroker, cfg: ExchLanesConfig) -> Result<Self, ExchError> {
        broker.declare_exchange(Exchange::new(EXCHANGE, ExchangeKind::Direct))?;
        for i in 0..cfg.queues.max(1) {
            let mut spec = cfg.queue_template.clone();
            spec.name = queue_name(i);
            spec.vhost = VHOST.into();
            spec.durable = cfg.at_least_once;
            broker.declare_queue(spec)?;
            broker.bind(Binding::new(EXCHANGE, queue_name(i)).key(queue_name(i)))?;
        }
        Ok(ExchLanes { broker, cfg })
    }
}

pub struct ExchProducer {
    channel: Channel,
    routing_key: String,
    persistent: bool,
}

impl ProducerLane for ExchProducer {
    fn send(&mut self, mut msg: Message) -> Result<(), BrokerError> {
        msg.routing_key = Some(self.routing_key.clone());
        loop {
            match self.channel.publish_blocking(VHOST, EXCHANGE, msg.clone(), self.persistent, Duration::from_secs(1)) {
                Ok(_) => return Ok(()),
                Err(ExchError::WindowFull) => {
                    self.channel.poll_confirms();
                }
                Err(e) => return Err(to_broker_error(e)),
            }
        }
    }

    fn flush(&mut self) -> Result<(), BrokerError> {
        self.channel.poll_confirms();
        Ok(())
    }
}

pub struct ExchConsumer {
    handle: ConsumerHandle,
    auto_ack: bool,
    clock: std::sync::Arc<dyn crate::clock::Clock>,
}

impl ConsumerLane for ExchConsumer {
    fn poll(&mut self, max: usize) -> Result<Vec<Delivered>, BrokerError> {
        let got = self.handle.recv(max);
        let now = self.clock.now_ns();
        let mut out = Vec::with_capacity(got.len());
        for d in got {
            if !self.auto_ack {
                self.handle.ack(d.delivery_tag).map_err(to_broker_error)?;
            }
            out.push(Delivered { msg: d.msg, at_ns: now });
        }
        Ok(out)
    }
}

impl Broker for ExchLanes {
    fn kind(&self) -> EngineKind {
        EngineKind::Exch
    }

    fn clock(&self) -> std::sync::Arc<dyn crate::clock::Clock> {
        self.broker.clock().clone()
    }

    fn producer(&self, index: usize) -> Box<dyn ProducerLane> {
        let mut channel = self.broker.open_channel();
        if self.cfg.at_least_once {
            let mirrored = !self.cfg.queue_template.mirrors.is_empty();
            channel.confirm_select(ConfirmPolicy { persistent: true, mirrored }, self.cfg.confirm_window);
        }
        Box::new(ExchProducer {
            channel,
            routing_key: queue_name(index % self.cfg.queues.max(1)),
            persistent: self.cfg.at_least_once,
        })
    }

    fn consumer(&self, index: usize) -> Box<dyn ConsumerLane> {
        let auto_ack = !self.cfg.at_least_once;
        let opts = ConsumeOptions { mode: ConsumeMode::Push, prefetch: self.cfg.prefetch, auto_ack };
        let q = queue_name(index % self.cfg.queues.max(1));
        let handle = self.broker.consume(VHOST, &q, &format!("c{index}"), opts).expect("bench queue declared in new()");
        Box::new(ExchConsumer { handle, auto_ack, clock: self.broker.clock().clone() })
    }

    fn payload_bytes_stored(&self) -> u64 {
        self.broker.payload_bytes_stored()
    }

    fn maintenance(&self) {
        self.broker.maintenance();
    }
}
