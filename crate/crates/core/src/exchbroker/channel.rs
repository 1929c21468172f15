use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use super::queue::BoundQueue;
use super::{ConsumerHandle, ExchBroker, ExchError};
use crate::fault::sites;
use crate::message::Message;
use crate::qos::ConfirmPolicy;

/// The strongest condition reached before a confirm was issued.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ConfirmStage {
    /// No queue matched; confirmed once routing finished.
    Unroutable,
    /// Accepted by every routed queue.
    Enqueued,
    /// Written to the durable region of at least one durable queue.
    Persisted,
    /// Accepted by every mirror of a mirrored queue.
    Mirrored,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Confirm {
    pub publish_seq: u64,
    pub ack: bool,
    pub routed: usize,
    pub stage: ConfirmStage,
}

struct TxPublish {
    vhost: String,
    exchange: String,
    msg: Message,
    persistent: bool,
}

struct TxAck {
    queue: Arc<Mutex<BoundQueue>>,
    consumer: u64,
    delivery_tag: u64,
}

#[derive(Default)]
struct TxState {
    publishes: Vec<TxPublish>,
    acks: Vec<TxAck>,
}

/// A single-threaded publishing session.
///
/// In confirm mode every publish gets a sequence number and a [`Confirm`];
/// a window `>= 0` bounds how many confirms may be outstanding (issued but
/// not yet collected with [`poll_confirms`](Channel::poll_confirms)).
pub struct Channel {
    broker: ExchBroker,
    id: u64,
    policy: ConfirmPolicy,
    window: Option<i64>,
    next_publish_seq: u64,
    pending: VecDeque<Confirm>,
    tx: Option<TxState>,
}

impl Channel {
    pub(super) fn new(broker: ExchBroker, id: u64) -> Self {
        Channel {
            broker,
            id,
            policy: ConfirmPolicy::default(),
            window: None,
            next_publish_seq: 1,
            pending: VecDeque::new(),
            tx: None,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Enable publisher confirms. `window` is the maximum number of
    /// outstanding confirms, or -1 for unlimited.
    pub fn confirm_select(&mut self, policy: ConfirmPolicy, window: i64) {
        self.policy = policy;
        self.window = Some(window);
    }

    pub fn in_confirm_mode(&self) -> bool {
        self.window.is_some()
    }

    pub fn outstanding(&self) -> usize {
        self.pending.len()
    }

    fn window_full(&self) -> bool {
        matches!(self.window, Some(w) if w >= 0 && self.pending.len() as i64 >= w)
    }

    /// Publish one message. Returns its publish sequence number; in confirm
    /// mode the matching [`Confirm`] is queued for
    /// [`poll_confirms`](Channel::poll_confirms). An error means no confirm
    /// will be issued and the producer still owns the message.
    pub fn publish(&mut self, vhost: &str, exchange: &str, msg: Message, persistent: bool) -> Result<u64, ExchError> {
        if self.window_full() {
            return Err(ExchError::WindowFull);
        }
        let out = self.broker.publish_inner(vhost, exchange, msg, persistent, self.policy)?;
        let seq = self.next_publish_seq;
        self.next_publish_seq += 1;
        if self.window.is_some() {
            self.pending.push_back(Confirm { publish_seq: seq, ack: out.ack, routed: out.routed, stage: out.stage });
        }
        Ok(seq)
    }

    /// Publish, waiting out flow control for at most `timeout`.
    pub fn publish_blocking(
        &mut self,
        vhost: &str,
        exchange: &str,
        msg: Message,
        persistent: bool,
        timeout: Duration,
    ) -> Result<u64, ExchError> {
        let deadline = Instant::now() + timeout;
        loop {
            match self.publish(vhost, exchange, msg.clone(), persistent) {
                Err(ExchError::FlowBlocked) => {
                    let now = Instant::now();
                    if now >= deadline {
                        return Err(ExchError::FlowBlocked);
                    }
                    self.broker.wait_flow((deadline - now).min(Duration::from_millis(50)));
                }
                other => return other,
            }
        }
    }

    /// Drain issued confirms in publish order.
    pub fn poll_confirms(&mut self) -> Vec<Confirm> {
        self.pending.drain(..).collect()
    }

    pub fn tx_select(&mut self) {
        if self.tx.is_none() {
            self.tx = Some(TxState::default());
        }
    }

    pub fn in_tx(&self) -> bool {
        self.tx.is_some()
    }

    pub fn tx_publish(&mut self, vhost: &str, exchange: &str, msg: Message, persistent: bool) -> Result<(), ExchError> {
        let tx = self.tx.as_mut().ok_or(ExchError::NotInTx)?;
        tx.publishes.push(TxPublish { vhost: vhost.into(), exchange: exchange.into(), msg, persistent });
        Ok(())
    }

    /// Buffer an ack of a delivery made to `consumer`; it takes effect at commit.
    pub fn tx_ack(&mut self, consumer: &ConsumerHandle, delivery_tag: u64) -> Result<(), ExchError> {
        let tx = self.tx.as_mut().ok_or(ExchError::NotInTx)?;
        tx.acks.push(TxAck { queue: consumer.queue.clone(), consumer: consumer.tag, delivery_tag });
        Ok(())
    }

    /// Apply buffered publishes in order, then buffered acks. A fault part
    /// way through leaves the publishes applied so far in place and reports
    /// [`ExchError::PartialFailure`]; the transaction is not atomic.
    pub fn tx_commit(&mut self) -> Result<usize, ExchError> {
        let tx = std::mem::take(self.tx.as_mut().ok_or(ExchError::NotInTx)?);
        let total = tx.publishes.len();
        for (i, p) in tx.publishes.into_iter().enumerate() {
            if self.broker.failpoints().hit(sites::EXCH_TX_COMMIT).is_some() {
                return Err(ExchError::PartialFailure { applied: i, total });
            }
            if let Err(e) = self.broker.publish_inner(&p.vhost, &p.exchange, p.msg, p.persistent, self.policy) {
                return match e {
                    ExchError::BrokerDown(_) => Err(ExchError::PartialFailure { applied: i, total }),
                    other => Err(other),
                };
            }
        }
        for a in tx.acks {
            let ok = a.queue.lock().unwrap().ack(a.consumer, a.delivery_tag, &self.broker.inner.acct);
            if !ok {
                return Err(ExchError::UnknownTag(a.delivery_tag));
            }
        }
        self.broker.settle();
        Ok(total)
    }

    pub fn tx_rollback(&mut self) -> Result<(), ExchError> {
        let tx = self.tx.as_mut().ok_or(ExchError::NotInTx)?;
        *tx = TxState::default();
        Ok(())
    }
}
