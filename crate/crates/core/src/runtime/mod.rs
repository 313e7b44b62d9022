//! Manager and worker loops over an abstract transport.

pub mod channel;
pub mod process;
pub mod wire;

use std::collections::{HashMap, VecDeque};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::alm::AlmConfig;
use crate::curve::{BranchId, IntervalResult};
use crate::engine::{self, Engine, EngineConfig, EngineError, Job, SerialOutput};
use crate::problem::{ProblemDef, SolutionPoint};

pub use channel::ChannelTransport;
pub use process::{ProcessTransport, StreamEndpoint};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error(transparent)]
    Wire(#[from] wire::WireError),
    #[error("worker count must be >= 1")]
    NoWorkers,
}

/// Everything a worker needs to compute one interval.
#[derive(Debug, Clone, PartialEq)]
pub struct JobMessage {
    pub id: u64,
    pub branch: BranchId,
    pub delta_l0: f64,
    pub subintervals: usize,
    pub w_start: SolutionPoint,
    pub w_prev: Option<SolutionPoint>,
    pub w_ref: SolutionPoint,
}

impl From<&Job> for JobMessage {
    fn from(job: &Job) -> Self {
        Self {
            id: job.id,
            branch: job.branch,
            delta_l0: job.delta_l0,
            subintervals: job.subintervals,
            w_start: job.w_start.clone(),
            w_prev: job.w_prev.clone(),
            w_ref: job.w_ref.clone(),
        }
    }
}

impl JobMessage {
    fn to_job(&self) -> Job {
        Job {
            id: self.id,
            branch: self.branch,
            xi_lo: 0.0,
            xi_hi: 0.0,
            delta_l0: self.delta_l0,
            w_start: self.w_start.clone(),
            w_prev: self.w_prev.clone(),
            w_ref: self.w_ref.clone(),
            level: 0,
            subintervals: self.subintervals,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataMessage {
    pub worker: usize,
    pub job: u64,
    pub distances: Vec<f64>,
    pub solutions: Vec<SolutionPoint>,
    pub lower_distance: f64,
    pub closing_distance: f64,
}

impl DataMessage {
    pub fn from_result(worker: usize, job: u64, r: IntervalResult) -> Self {
        Self {
            worker,
            job,
            distances: r.distances,
            solutions: r.solutions,
            lower_distance: r.lower_distance,
            closing_distance: r.closing_distance,
        }
    }

    pub fn into_result(self) -> IntervalResult {
        IntervalResult {
            distances: self.distances,
            solutions: self.solutions,
            lower_distance: self.lower_distance,
            closing_distance: self.closing_distance,
        }
    }
}

/// Sent instead of data when the interval solve itself fails.
#[derive(Debug, Clone, PartialEq)]
pub struct FailureMessage {
    pub worker: usize,
    pub job: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Stop(bool),
    Job(JobMessage),
    Data(DataMessage),
    Failed(FailureMessage),
}

impl Message {
    fn kind(&self) -> &'static str {
        match self {
            Message::Stop(_) => "stop",
            Message::Job(_) => "job",
            Message::Data(_) => "data",
            Message::Failed(_) => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ManagerEvent {
    Received(usize, Message),
    Disconnected(usize),
}

/// Manager side of a transport: addressed sends, one merged inbox.
pub trait ManagerTransport {
    fn worker_count(&self) -> usize;
    fn send(&mut self, worker: usize, msg: &Message) -> Result<(), RuntimeError>;
    fn recv(&mut self) -> Result<ManagerEvent, RuntimeError>;
    /// Waits for workers to exit after the final stop.
    fn shutdown(&mut self) -> Result<(), RuntimeError>;
}

pub trait WorkerEndpoint {
    /// `Ok(None)` when the manager is gone.
    fn recv(&mut self) -> Result<Option<Message>, RuntimeError>;
    fn send(&mut self, msg: &Message) -> Result<(), RuntimeError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DispatchRecord {
    pub worker: usize,
    pub job: u64,
    pub branch: BranchId,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ManagerStats {
    pub dispatched: usize,
    pub failed: usize,
    pub max_in_flight: usize,
    pub jobs_per_worker: Vec<usize>,
    pub dispatch_log: Vec<DispatchRecord>,
    pub lost_workers: Vec<usize>,
    pub stop_broadcasts: usize,
}

/// Manager loop: hand queued jobs to idle workers, submit every returned
/// result, and broadcast the final stop once the queue is empty and every
/// worker is idle. A lost worker's in-flight job is submitted as failed.
pub fn run_manager(engine: &mut Engine, transport: &mut dyn ManagerTransport) -> Result<ManagerStats, RuntimeError> {
    let count = transport.worker_count();
    if count == 0 {
        return Err(RuntimeError::NoWorkers);
    }
    let mut stats = ManagerStats {
        jobs_per_worker: vec![0; count],
        ..ManagerStats::default()
    };
    let mut idle: VecDeque<usize> = (0..count).collect();
    let mut alive = vec![true; count];
    let mut in_flight: HashMap<usize, Job> = HashMap::new();

    loop {
        while engine.queue_len() > 0 {
            let Some(worker) = idle.pop_front() else { break };
            let job = engine.pop()?;
            let sent = transport
                .send(worker, &Message::Stop(false))
                .and_then(|_| transport.send(worker, &Message::Job(JobMessage::from(&job))));
            match sent {
                Ok(()) => {
                    stats.dispatched += 1;
                    stats.jobs_per_worker[worker] += 1;
                    stats.dispatch_log.push(DispatchRecord {
                        worker,
                        job: job.id,
                        branch: job.branch,
                    });
                    in_flight.insert(worker, job);
                    stats.max_in_flight = stats.max_in_flight.max(in_flight.len());
                }
                Err(e) => {
                    alive[worker] = false;
                    stats.lost_workers.push(worker);
                    stats.failed += 1;
                    engine.submit(&job, Err(format!("worker {worker} unreachable: {e}")))?;
                }
            }
        }

        if in_flight.is_empty() {
            if engine.queue_len() == 0 {
                break;
            }
            // No live worker left: the rest of the queue keeps its coarse data.
            while engine.queue_len() > 0 {
                let job = engine.pop()?;
                stats.failed += 1;
                engine.submit(&job, Err("no live workers".into()))?;
            }
            break;
        }

        match transport.recv()? {
            ManagerEvent::Received(worker, Message::Data(data)) => {
                let job = take_in_flight(&mut in_flight, worker, data.job)?;
                engine.submit(&job, Ok(data.into_result()))?;
                idle.push_back(worker);
            }
            ManagerEvent::Received(worker, Message::Failed(f)) => {
                let job = take_in_flight(&mut in_flight, worker, f.job)?;
                stats.failed += 1;
                engine.submit(&job, Err(f.reason))?;
                idle.push_back(worker);
            }
            ManagerEvent::Received(worker, other) => {
                return Err(RuntimeError::Protocol(format!(
                    "unexpected {} message from worker {worker}",
                    other.kind()
                )));
            }
            ManagerEvent::Disconnected(worker) => {
                if !alive[worker] {
                    continue;
                }
                alive[worker] = false;
                stats.lost_workers.push(worker);
                idle.retain(|w| *w != worker);
                if let Some(job) = in_flight.remove(&worker) {
                    stats.failed += 1;
                    engine.submit(&job, Err(format!("worker {worker} disconnected")))?;
                }
            }
        }
    }

    for worker in (0..count).filter(|w| alive[*w]) {
        if let Err(e) = transport.send(worker, &Message::Stop(true)) {
            log::debug!("stop to worker {worker} not delivered: {e}");
        }
    }
    stats.stop_broadcasts += 1;
    transport.shutdown()?;
    Ok(stats)
}

fn take_in_flight(in_flight: &mut HashMap<usize, Job>, worker: usize, id: u64) -> Result<Job, RuntimeError> {
    match in_flight.remove(&worker) {
        Some(job) if job.id == id => Ok(job),
        Some(job) => Err(RuntimeError::Protocol(format!(
            "worker {worker} answered job {id} while holding job {}",
            job.id
        ))),
        None => Err(RuntimeError::Protocol(format!("worker {worker} answered job {id} it was never sent"))),
    }
}

/// Worker loop: wait for `stop=false` then a job, solve it, answer; exit on
/// `stop=true`. Returns the number of jobs executed.
pub fn run_worker(
    problem: &ProblemDef,
    alm: &AlmConfig,
    worker: usize,
    endpoint: &mut dyn WorkerEndpoint,
) -> Result<usize, RuntimeError> {
    let mut executed = 0;
    loop {
        match endpoint.recv()? {
            Some(Message::Stop(true)) => return Ok(executed),
            Some(Message::Stop(false)) => {}
            Some(other) => {
                return Err(RuntimeError::Protocol(format!("worker {worker}: expected stop, got {}", other.kind())));
            }
            None => return Err(RuntimeError::Transport(format!("worker {worker}: manager closed the channel"))),
        }
        let msg = match endpoint.recv()? {
            Some(Message::Job(j)) => j,
            Some(other) => {
                return Err(RuntimeError::Protocol(format!("worker {worker}: expected job, got {}", other.kind())));
            }
            None => return Err(RuntimeError::Transport(format!("worker {worker}: manager closed the channel"))),
        };
        let reply = match engine::solve_interval(problem, alm, &msg.to_job()) {
            Ok(r) => Message::Data(DataMessage::from_result(worker, msg.id, r)),
            Err(e) => Message::Failed(FailureMessage {
                worker,
                job: msg.id,
                reason: e.to_string(),
            }),
        };
        endpoint.send(&reply)?;
        executed += 1;
    }
}

#[derive(Debug, Clone)]
pub struct ApalmOutput {
    pub serial: SerialOutput,
    pub engine: Engine,
    pub stats: ManagerStats,
    /// Serial solve plus map initialisation.
    pub serial_time: Duration,
    /// Manager loop from first dispatch to final stop.
    pub parallel_time: Duration,
}

/// Serial stage on the manager, then the queue over `transport`.
pub fn apalm_with(
    problem: &ProblemDef,
    alm: &AlmConfig,
    config: &EngineConfig,
    transport: &mut dyn ManagerTransport,
) -> Result<ApalmOutput, RuntimeError> {
    let t0 = Instant::now();
    let serial = engine::serial_solve(problem, alm, config)?;
    let mut state = Engine::initialize(&serial, config)?;
    let serial_time = t0.elapsed();
    let t1 = Instant::now();
    let stats = run_manager(&mut state, transport)?;
    Ok(ApalmOutput {
        serial,
        engine: state,
        stats,
        serial_time,
        parallel_time: t1.elapsed(),
    })
}

/// APALM with `workers` in-process worker threads.
pub fn apalm(problem: &ProblemDef, alm: &AlmConfig, config: &EngineConfig, workers: usize) -> Result<ApalmOutput, RuntimeError> {
    if workers == 0 {
        return Err(RuntimeError::NoWorkers);
    }
    alm.validate().map_err(EngineError::from)?;
    config.validate()?;
    let mut transport = ChannelTransport::spawn_workers(problem, alm, workers);
    apalm_with(problem, alm, config, &mut transport)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alm::Constraint;
    use crate::problem::BuiltinSpec;

    fn alm_cfg(psi: f64) -> AlmConfig {
        AlmConfig {
            constraint: Constraint::Crisfield,
            psi,
            ..AlmConfig::default()
        }
    }

    fn cubic_cfg() -> EngineConfig {
        EngineConfig {
            delta_l: 0.5,
            steps: 8,
            tol_lower: 1e-3,
            tol_upper: 1e-3,
            max_level: 5,
            ..EngineConfig::default()
        }
    }

    fn assert_same(a: &Engine, b: &Engine) {
        let (pa, pb) = (a.collect(), b.collect());
        assert_eq!(pa.len(), pb.len());
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!((x.branch, x.xi.to_bits(), x.level), (y.branch, y.xi.to_bits(), y.level));
            assert_eq!(x.w, y.w);
        }
    }

    #[test]
    fn single_worker_matches_serial_aalm() {
        let p = BuiltinSpec::Cubic1d.build().unwrap();
        let reference = engine::aalm(&p, &alm_cfg(1.0), &cubic_cfg()).unwrap();
        let out = apalm(&p, &alm_cfg(1.0), &cubic_cfg(), 1).unwrap();
        assert_same(&out.engine, &reference.engine);
        assert_eq!(out.stats.stop_broadcasts, 1);
        assert_eq!(out.stats.dispatched, reference.engine.records().len());
    }

    #[test]
    fn worker_counts_give_identical_maps() {
        let p = BuiltinSpec::Cubic1d.build().unwrap();
        let one = apalm(&p, &alm_cfg(1.0), &cubic_cfg(), 1).unwrap();
        for n in [2, 3, 4] {
            let out = apalm(&p, &alm_cfg(1.0), &cubic_cfg(), n).unwrap();
            assert_same(&out.engine, &one.engine);
        }
    }

    #[test]
    fn startup_fills_every_worker() {
        let p = BuiltinSpec::Linear1d { stiffness: 1.0, load: 1.0 }.build().unwrap();
        let cfg = EngineConfig { steps: 8, ..EngineConfig::default() };
        let out = apalm(&p, &alm_cfg(1.0), &cfg, 4).unwrap();
        assert!(out.stats.max_in_flight >= 4);
        assert_eq!(out.stats.dispatched, 8);
    }

    #[test]
    fn empty_queue_stops_immediately() {
        let p = BuiltinSpec::Linear1d { stiffness: 1.0, load: 1.0 }.build().unwrap();
        let serial = SerialOutput {
            branches: vec![engine::SerialBranch {
                points: vec![p.start_point()],
                s: vec![0.0],
                start_prev: None,
                parent: None,
            }],
            singularities: vec![],
        };
        let mut e = Engine::initialize(&serial, &EngineConfig::default()).unwrap();
        let mut t = ChannelTransport::spawn_workers(&p, &alm_cfg(1.0), 3);
        let stats = run_manager(&mut e, &mut t).unwrap();
        assert_eq!((stats.dispatched, stats.stop_broadcasts), (0, 1));
        assert_eq!(e.collect().len(), 1);
    }

    #[test]
    fn zero_workers_rejected() {
        let p = BuiltinSpec::Cubic1d.build().unwrap();
        assert!(matches!(apalm(&p, &alm_cfg(1.0), &cubic_cfg(), 0), Err(RuntimeError::NoWorkers)));
    }
}
