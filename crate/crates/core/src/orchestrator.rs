//! Job execution: runs queued tuning jobs either inline (inside the request
//! that made them runnable) or on a pool of worker threads.
//!
//! Jobs that touch the same deployment lineage never run at the same time:
//! drift jobs are keyed by their deployment, every other job by the name of
//! the model it produces.

use std::collections::BTreeSet;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::Duration;

use crate::config::JobMode;
use crate::error::{Error, Result};
use crate::registry::{JobRecord, JobTrigger, Registry};

#[derive(Default)]
struct State {
    running: BTreeSet<String>,
    busy: BTreeSet<String>,
    shutdown: bool,
}

struct Shared {
    registry: Arc<Registry>,
    state: Mutex<State>,
    wake: Condvar,
    idle: Condvar,
}

pub struct JobRunner {
    shared: Arc<Shared>,
    mode: JobMode,
    workers: Vec<JoinHandle<()>>,
}

fn serial_key(job: &JobRecord) -> String {
    match (job.trigger, &job.deployment_id) {
        (JobTrigger::DriftAlarm, Some(dep)) => format!("dep:{dep}"),
        _ => format!("name:{}", job.model_name),
    }
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Picks the oldest ready job that is neither running nor blocked by a
    /// job on the same lineage, and marks it as taken.
    fn claim_next(&self, state: &mut State) -> Result<Option<(String, String)>> {
        for job in self.registry.ready_jobs()? {
            let key = serial_key(&job);
            if state.running.contains(&job.id) || state.busy.contains(&key) {
                continue;
            }
            state.running.insert(job.id.clone());
            state.busy.insert(key.clone());
            return Ok(Some((job.id, key)));
        }
        Ok(None)
    }

    fn release(&self, id: &str, key: &str) {
        let mut st = self.lock();
        st.running.remove(id);
        st.busy.remove(key);
        drop(st);
        self.idle.notify_all();
        self.wake.notify_all();
    }

    fn run_claimed(&self, id: &str, key: &str) -> Result<JobRecord> {
        let out = self.registry.run_job(id);
        self.release(id, key);
        if let Err(e) = &out {
            log::warn!("job {id} did not commit: {e}");
        }
        out
    }

    fn worker(self: Arc<Self>) {
        loop {
            let claimed = {
                let mut st = self.lock();
                loop {
                    if st.shutdown {
                        return;
                    }
                    match self.claim_next(&mut st) {
                        Ok(Some(c)) => break c,
                        Ok(None) => {}
                        Err(e) => log::error!("cannot list ready jobs: {e}"),
                    }
                    st = self
                        .wake
                        .wait_timeout(st, Duration::from_millis(250))
                        .unwrap_or_else(|e| e.into_inner())
                        .0;
                }
            };
            let _ = self.run_claimed(&claimed.0, &claimed.1);
        }
    }
}

impl JobRunner {
    /// In background mode, starts `workers` threads (at least one).
    pub fn new(registry: Arc<Registry>, mode: JobMode, workers: usize) -> Self {
        let shared = Arc::new(Shared {
            registry,
            state: Mutex::new(State::default()),
            wake: Condvar::new(),
            idle: Condvar::new(),
        });
        let workers = match mode {
            JobMode::Inline => Vec::new(),
            JobMode::Background => (0..workers.max(1))
                .map(|i| {
                    let s = shared.clone();
                    std::thread::Builder::new()
                        .name(format!("mmgr-job-{i}"))
                        .spawn(move || s.worker())
                        .expect("spawn job worker")
                })
                .collect(),
        };
        Self { shared, mode, workers }
    }

    pub fn mode(&self) -> JobMode {
        self.mode
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.shared.registry
    }

    /// Signals that jobs may have become ready. Inline runners execute
    /// them before returning.
    pub fn kick(&self) -> Result<Vec<JobRecord>> {
        match self.mode {
            JobMode::Inline => self.drain(),
            JobMode::Background => {
                self.shared.wake.notify_all();
                Ok(Vec::new())
            }
        }
    }

    /// Runs ready jobs on the calling thread until none is left.
    pub fn drain(&self) -> Result<Vec<JobRecord>> {
        let mut done = Vec::new();
        loop {
            let claimed = {
                let mut st = self.shared.lock();
                self.shared.claim_next(&mut st)?
            };
            let Some((id, key)) = claimed else {
                return Ok(done);
            };
            match self.shared.run_claimed(&id, &key) {
                Ok(job) => done.push(job),
                // The job stays running in the store; do not spin on it.
                Err(e) => return Err(e),
            }
        }
    }

    /// Runs a specific job now, whether or not it is marked ready.
    pub fn run(&self, id: &str) -> Result<JobRecord> {
        let job = self.shared.registry.get_job(id)?;
        let key = serial_key(&job);
        {
            let mut st = self.shared.lock();
            if st.running.contains(id) {
                return Err(Error::State(format!("job {id} is already running")));
            }
            while st.busy.contains(&key) {
                st = self.shared.idle.wait(st).unwrap_or_else(|e| e.into_inner());
            }
            st.running.insert(id.to_string());
            st.busy.insert(key.clone());
        }
        self.shared.run_claimed(id, &key)
    }

    /// Starts `id` on a background thread and returns immediately.
    pub fn spawn(&self, id: &str) -> Result<()> {
        let job = self.shared.registry.get_job(id)?;
        let key = serial_key(&job);
        {
            let mut st = self.shared.lock();
            if st.running.contains(id) {
                return Err(Error::State(format!("job {id} is already running")));
            }
            if st.busy.contains(&key) {
                // Another job on this lineage is active; a worker will get to it.
                drop(st);
                self.shared.wake.notify_all();
                return Ok(());
            }
            st.running.insert(id.to_string());
            st.busy.insert(key.clone());
        }
        let shared = self.shared.clone();
        let id = id.to_string();
        std::thread::spawn(move || {
            let _ = shared.run_claimed(&id, &key);
        });
        Ok(())
    }

    /// Blocks until no job is running and no ready job is left, or the
    /// timeout expires. Returns whether the runner went idle.
    pub fn wait_idle(&self, timeout: Duration) -> Result<bool> {
        let deadline = std::time::Instant::now() + timeout;
        loop {
            {
                let st = self.shared.lock();
                if st.running.is_empty() && self.shared.registry.ready_jobs()?.is_empty() {
                    return Ok(true);
                }
                let now = std::time::Instant::now();
                if now >= deadline {
                    return Ok(false);
                }
                let wait = (deadline - now).min(Duration::from_millis(50));
                drop(self.shared.idle.wait_timeout(st, wait).unwrap_or_else(|e| e.into_inner()));
            }
            if self.mode == JobMode::Inline {
                self.drain()?;
            }
        }
    }
}

impl Drop for JobRunner {
    fn drop(&mut self) {
        self.shared.lock().shutdown = true;
        self.shared.wake.notify_all();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}
