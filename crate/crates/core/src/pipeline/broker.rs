//! In-process partitioned queue: one channel and one ordered consumer thread
//! per line, all writing into the same [`Pipeline`].

use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use super::{IngestMessage, IngestOutcome, Pipeline, PipelineError, RejectReason, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestTally {
    pub accepted: usize,
    pub duplicate: usize,
    pub rejected: usize,
    pub errors: usize,
}

impl IngestTally {
    fn count(&mut self, r: &Result<IngestOutcome>) {
        match r {
            Ok(IngestOutcome::Accepted) => self.accepted += 1,
            Ok(IngestOutcome::Duplicate) => self.duplicate += 1,
            Ok(IngestOutcome::Rejected { .. }) => self.rejected += 1,
            Err(_) => self.errors += 1,
        }
    }
}

struct Job {
    version: u32,
    msg: IngestMessage,
    reply: Option<Sender<Result<IngestOutcome>>>,
}

pub struct Broker {
    partitions: Vec<Sender<Job>>,
    consumers: Vec<JoinHandle<()>>,
    tally: Arc<Mutex<IngestTally>>,
}

impl Broker {
    pub fn start(pipeline: Arc<Pipeline>) -> Self {
        let lines = pipeline.config().lines;
        let tally = Arc::new(Mutex::new(IngestTally::default()));
        let mut partitions = Vec::with_capacity(lines as usize);
        let mut consumers = Vec::with_capacity(lines as usize);
        for line in 0..lines {
            let (tx, rx) = mpsc::channel::<Job>();
            let p = pipeline.clone();
            let tally = tally.clone();
            let handle = std::thread::Builder::new()
                .name(format!("line-{line}"))
                .spawn(move || {
                    for job in rx {
                        let out = p.ingest(job.version, &job.msg);
                        if let Err(e) = &out {
                            log::warn!("line {line}: {e}");
                        }
                        tally.lock().expect("tally lock").count(&out);
                        if let Some(reply) = job.reply {
                            let _ = reply.send(out);
                        }
                    }
                })
                .expect("spawn line consumer");
            partitions.push(tx);
            consumers.push(handle);
        }
        Self {
            partitions,
            consumers,
            tally,
        }
    }

    fn route(&self, job: Job) -> Result<()> {
        let Some(tx) = self.partitions.get(job.msg.line as usize) else {
            let out = Ok(IngestOutcome::Rejected {
                reason: RejectReason::UnknownLine(job.msg.line),
            });
            self.tally.lock().expect("tally lock").count(&out);
            if let Some(reply) = job.reply {
                let _ = reply.send(out);
            }
            return Ok(());
        };
        tx.send(job).map_err(|_| PipelineError::BrokerClosed)
    }

    /// Enqueues on the message's line; the receiver yields the outcome once
    /// the consumer has processed it.
    pub fn submit(&self, version: u32, msg: IngestMessage) -> Result<Receiver<Result<IngestOutcome>>> {
        let (tx, rx) = mpsc::channel();
        self.route(Job {
            version,
            msg,
            reply: Some(tx),
        })?;
        Ok(rx)
    }

    pub fn ingest(&self, version: u32, msg: IngestMessage) -> Result<IngestOutcome> {
        self.submit(version, msg)?
            .recv()
            .map_err(|_| PipelineError::BrokerClosed)?
    }

    /// Fire and forget; outcomes only show up in the tally.
    pub fn publish(&self, version: u32, msg: IngestMessage) -> Result<()> {
        self.route(Job {
            version,
            msg,
            reply: None,
        })
    }

    pub fn tally(&self) -> IngestTally {
        *self.tally.lock().expect("tally lock")
    }

    /// Stops accepting work, drains every partition and joins the consumers.
    pub fn shutdown(self) -> IngestTally {
        drop(self.partitions);
        for c in self.consumers {
            let _ = c.join();
        }
        let t = *self.tally.lock().expect("tally lock");
        t
    }

    /// Pushes `deliveries` through a fresh broker and waits for the drain.
    pub fn replay(
        pipeline: Arc<Pipeline>,
        version: u32,
        deliveries: impl IntoIterator<Item = IngestMessage>,
    ) -> Result<IngestTally> {
        let broker = Self::start(pipeline);
        for m in deliveries {
            broker.publish(version, m)?;
        }
        Ok(broker.shutdown())
    }
}
