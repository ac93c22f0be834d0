use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{unbounded, Sender};

use crate::precond::{refresh_inverse, FactorSnapshot, PrecondError, RefreshResult};

pub(crate) struct PoolJob {
    pub job_id: u64,
    pub snapshot: Arc<FactorSnapshot>,
    pub real_delay: Duration,
    pub reply: Sender<JobDone>,
}

/// A finished refresh as delivered back to the dispatching runtime.
#[derive(Debug)]
pub struct JobDone {
    pub job_id: u64,
    pub block_id: u32,
    pub result: Result<RefreshResult, PrecondError>,
    /// Snapshot checksum observed when the worker picked the job up.
    pub start_checksum: u64,
}

/// Shared threads executing pure refresh jobs. Jobs run in submission
/// order per worker; results go back on the channel carried by each job.
pub struct WorkerPool {
    tx: Option<Sender<PoolJob>>,
    workers: Vec<JoinHandle<()>>,
}

impl std::fmt::Debug for WorkerPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WorkerPool").field("threads", &self.workers.len()).finish()
    }
}

impl WorkerPool {
    pub fn new(threads: usize) -> std::io::Result<Arc<Self>> {
        let (tx, rx) = unbounded::<PoolJob>();
        let mut workers = Vec::with_capacity(threads.max(1));
        for i in 0..threads.max(1) {
            let rx = rx.clone();
            workers.push(
                std::thread::Builder::new()
                    .name(format!("refresh-{i}"))
                    .spawn(move || {
                        for job in rx {
                            let start_checksum = job.snapshot.checksum();
                            if !job.real_delay.is_zero() {
                                std::thread::sleep(job.real_delay);
                            }
                            let result = refresh_inverse(&job.snapshot);
                            let _ = job.reply.send(JobDone {
                                job_id: job.job_id,
                                block_id: job.snapshot.block_id,
                                result,
                                start_checksum,
                            });
                        }
                    })?,
            );
        }
        Ok(Arc::new(Self {
            tx: Some(tx),
            workers,
        }))
    }

    pub fn threads(&self) -> usize {
        self.workers.len()
    }

    pub(crate) fn submit(&self, job: PoolJob) -> bool {
        self.tx.as_ref().map(|tx| tx.send(job).is_ok()).unwrap_or(false)
    }
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        self.tx.take();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}
