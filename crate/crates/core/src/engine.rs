//! Serial initialisation, the interval job queue and its bookkeeping, and
//! the single-process adaptive driver.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alm::{self, AlmConfig, AlmError, LocatedSingularity, SingularKind};
use crate::curve::{
    BranchId, CollectedPoint, CurveError, CurveMap, IntervalDescriptor, IntervalResult, RefineFlags,
};
use crate::problem::{Increment, ProblemDef, SolutionPoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("serial solve failed on branch {branch} at step {step}: {source}")]
    Serial {
        branch: BranchId,
        step: usize,
        source: AlmError,
    },
    #[error(transparent)]
    Alm(#[from] AlmError),
    #[error(transparent)]
    Curve(#[from] CurveError),
    #[error("pop on an empty queue")]
    EmptyQueue,
    #[error("invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    /// Serial step length on the first branch.
    pub delta_l: f64,
    /// Serial step count `I` on the first branch.
    pub steps: usize,
    /// Fine steps `N` per interval job.
    pub subintervals: usize,
    pub tol_lower: f64,
    pub tol_upper: f64,
    pub max_level: u32,
    pub bifurcation: bool,
    /// Serial step length on branches spawned by a branch switch.
    pub branch_delta_l: Option<f64>,
    pub branch_steps: Option<usize>,
    pub max_branches: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            delta_l: 1.0,
            steps: 10,
            subintervals: 2,
            tol_lower: 1e-2,
            tol_upper: 1e-2,
            max_level: 8,
            bifurcation: false,
            branch_delta_l: None,
            branch_steps: None,
            max_branches: 8,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |msg: &str| Err(EngineError::Config(format!("engine.{msg}")));
        if !(self.delta_l.is_finite() && self.delta_l > 0.0) {
            return bad("delta_l must be > 0");
        }
        if self.steps < 1 {
            return bad("steps must be >= 1");
        }
        if self.subintervals < 2 {
            return bad("subintervals must be >= 2");
        }
        if !(self.tol_lower.is_finite() && self.tol_lower > 0.0) {
            return bad("tol_lower must be > 0");
        }
        if !(self.tol_upper.is_finite() && self.tol_upper > 0.0) {
            return bad("tol_upper must be > 0");
        }
        if self.max_level < 1 {
            return bad("max_level must be >= 1");
        }
        if let Some(d) = self.branch_delta_l {
            if !(d.is_finite() && d > 0.0) {
                return bad("branch_delta_l must be > 0");
            }
        }
        if self.branch_steps == Some(0) {
            return bad("branch_steps must be >= 1");
        }
        if self.max_branches < 1 {
            return bad("max_branches must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SerialBranch {
    pub points: Vec<SolutionPoint>,
    pub s: Vec<f64>,
    /// Predecessor of the first point, present on switched branches so that
    /// jobs leaving the branch start follow the new branch.
    pub start_prev: Option<SolutionPoint>,
    pub parent: Option<BranchId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SingularityRecord {
    pub branch: BranchId,
    pub located: LocatedSingularity,
    pub spawned: Option<BranchId>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SerialOutput {
    pub branches: Vec<SerialBranch>,
    pub singularities: Vec<SingularityRecord>,
}

struct BranchSeed {
    start: SolutionPoint,
    predictor: Option<Increment>,
    parent: Option<BranchId>,
}

/// Serial arc-length run on every branch. With bifurcation handling on, a
/// sign change of `det K` between consecutive points is located; limit
/// points are recorded and passed, bifurcations spawn a new branch along
/// the null vector.
pub fn serial_solve(problem: &ProblemDef, alm: &AlmConfig, engine: &EngineConfig) -> Result<SerialOutput, EngineError> {
    alm.validate()?;
    engine.validate()?;
    let metric = alm.metric(problem)?;
    let mut out = SerialOutput::default();
    let mut seeds = VecDeque::from([BranchSeed {
        start: problem.start_point(),
        predictor: None,
        parent: None,
    }]);

    while let Some(seed) = seeds.pop_front() {
        let branch = out.branches.len();
        let (delta_l, steps) = if branch == 0 {
            (engine.delta_l, engine.steps)
        } else {
            (
                engine.branch_delta_l.unwrap_or(engine.delta_l),
                engine.branch_steps.unwrap_or(engine.steps),
            )
        };
        let start_prev = seed.predictor.as_ref().map(|p| seed.start.advanced(&p.scaled(-1.0)));
        let mut points = vec![seed.start];
        let mut s = vec![0.0];
        let mut prev = seed.predictor;
        // The start of a switched branch sits on the singular point itself.
        let mut last_regular: Option<(usize, i8)> = None;
        if engine.bifurcation && branch == 0 {
            let st = alm::detect_singular(problem, &points[0])?;
            if !st.singular {
                last_regular = Some((0, st.det_sign));
            }
        }

        for k in 1..=steps {
            let from = points.last().expect("nonempty");
            let res = alm::step(problem, alm, from, prev.as_ref(), delta_l).map_err(|source| EngineError::Serial {
                branch,
                step: k,
                source,
            })?;
            let w_new = res.w_new;
            prev = Some(w_new.delta_from(from));
            s.push(s[k - 1] + metric.between(&w_new, from));
            points.push(w_new);

            if !engine.bifurcation {
                continue;
            }
            let st = alm::detect_singular(problem, &points[k])?;
            if st.singular {
                continue;
            }
            if let Some((j, sign)) = last_regular {
                if sign != st.det_sign {
                    let a = if j + 1 < k { &points[k - 1] } else { &points[j] };
                    let record = match alm::locate_bifurcation(problem, alm, a, &points[k]) {
                        Ok(located) => {
                            let mut record = SingularityRecord {
                                branch,
                                located,
                                spawned: None,
                                note: None,
                            };
                            if record.located.kind == SingularKind::Bifurcation {
                                let total = out.branches.len() + 1 + seeds.len();
                                if total >= engine.max_branches {
                                    record.note = Some("branch limit reached".into());
                                } else {
                                    match alm::branch_switch(problem, &record.located.point, alm.branch_perturbation) {
                                        Ok(pred) => {
                                            record.spawned = Some(total);
                                            seeds.push_back(BranchSeed {
                                                start: record.located.point.clone(),
                                                predictor: Some(pred),
                                                parent: Some(branch),
                                            });
                                        }
                                        Err(e) => record.note = Some(e.to_string()),
                                    }
                                }
                            }
                            Some(record)
                        }
                        Err(e) => {
                            log::warn!("branch {branch}: singular point between steps {} and {k} not located: {e}", k - 1);
                            None
                        }
                    };
                    out.singularities.extend(record);
                }
            }
            last_regular = Some((k, st.det_sign));
        }
        out.branches.push(SerialBranch {
            points,
            s,
            start_prev,
            parent: seed.parent,
        });
    }
    Ok(out)
}

/// One queued interval with everything a worker needs to compute it.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub id: u64,
    pub branch: BranchId,
    pub xi_lo: f64,
    pub xi_hi: f64,
    pub delta_l0: f64,
    pub w_start: SolutionPoint,
    pub w_prev: Option<SolutionPoint>,
    pub w_ref: SolutionPoint,
    pub level: u32,
    pub subintervals: usize,
}

impl Job {
    pub fn descriptor(&self) -> IntervalDescriptor {
        IntervalDescriptor {
            branch: self.branch,
            xi_lo: self.xi_lo,
            xi_hi: self.xi_hi,
            delta_l0: self.delta_l0,
            level: self.level,
        }
    }
}

/// `N` fine steps of nominal length `ΔL₀/N` from the job start, warm
/// started from `w_start − w_prev`. A cut step consumes only its share of
/// the nominal length, so cuts add extra fine points rather than shortening
/// the interval.
pub fn solve_interval(problem: &ProblemDef, alm: &AlmConfig, job: &Job) -> Result<IntervalResult, AlmError> {
    if job.subintervals < 1 || !(job.delta_l0 > 0.0) {
        return Err(AlmError::InvalidInput("job with empty interval".into()));
    }
    let metric = alm.metric(problem)?;
    let h = job.delta_l0 / job.subintervals as f64;
    let max_points = job.subintervals << (alm.max_step_cuts + 1);
    let mut prev = job.w_prev.as_ref().map(|p| job.w_start.delta_from(p));
    let mut solutions = vec![job.w_start.clone()];
    let mut distances = Vec::with_capacity(job.subintervals);
    // In units of h; only dyadic fractions are subtracted, so this is exact.
    let mut remaining = job.subintervals as f64;
    while remaining > 0.0 {
        if distances.len() >= max_points {
            return Err(AlmError::InvalidInput("interval needs too many cut steps".into()));
        }
        let frac = remaining.min(1.0);
        let from = solutions.last().expect("nonempty");
        let res = alm::step(problem, alm, from, prev.as_ref(), h * frac)?;
        remaining -= frac * res.nominal_fraction();
        prev = Some(res.w_new.delta_from(from));
        distances.push(res.achieved_length);
        solutions.push(res.w_new);
    }
    let last = solutions.last().expect("nonempty");
    Ok(IntervalResult {
        lower_distance: metric.between(last, &job.w_start),
        closing_distance: metric.between(&job.w_ref, last),
        distances,
        solutions,
    })
}

/// Refinement indicators of one interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorTriple {
    /// `ε = (ΔL′ − ΔL₀)/ΔL₀`.
    pub total: f64,
    /// `ε_l = (ΔL₀ − ΔL̄)/ΔL₀`.
    pub lower: f64,
    /// `ε_u = (ε − ε_l)/ΔL₀`.
    pub upper: f64,
    /// `ε − ε_l` without the extra division.
    pub upper_raw: f64,
}

pub fn compute_errors(delta_l0: f64, distances: &[f64], lower_distance: f64, closing_distance: f64) -> ErrorTriple {
    let fine: f64 = distances.iter().sum::<f64>() + closing_distance;
    let total = (fine - delta_l0) / delta_l0;
    let lower = (delta_l0 - lower_distance) / delta_l0;
    let upper_raw = total - lower;
    ErrorTriple {
        total,
        lower,
        upper: upper_raw / delta_l0,
        upper_raw,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubmitAction {
    Interior,
    Stretch,
    Failed,
}

/// What happened to one job on submission.
#[derive(Debug, Clone, PartialEq)]
pub struct JobRecord {
    pub id: u64,
    pub interval: IntervalDescriptor,
    pub action: SubmitAction,
    pub errors: Option<ErrorTriple>,
    pub fine_points: usize,
    pub path_length: f64,
    pub lower_distance: f64,
    pub closing_distance: f64,
    pub children_queued: usize,
    pub children_capped: usize,
    pub failure: Option<String>,
}

/// Maps for every branch plus the FIFO queue of pending intervals. Only the
/// owner mutates it; workers only ever see [`Job`] values.
#[derive(Debug, Clone)]
pub struct Engine {
    config: EngineConfig,
    maps: Vec<CurveMap>,
    queue: VecDeque<IntervalDescriptor>,
    next_id: u64,
    records: Vec<JobRecord>,
    warnings: Vec<String>,
    monotone_checks: usize,
    monotone_violations: usize,
}

impl Engine {
    /// Builds one map per branch and queues every serial interval at
    /// level 1.
    pub fn initialize(serial: &SerialOutput, config: &EngineConfig) -> Result<Self, EngineError> {
        config.validate()?;
        let mut maps = Vec::with_capacity(serial.branches.len());
        let mut queue = VecDeque::new();
        for (b, branch) in serial.branches.iter().enumerate() {
            let map = CurveMap::init(b, &branch.points, &branch.s, branch.start_prev.clone())?;
            queue.extend(map.initial_intervals());
            maps.push(map);
        }
        Ok(Self {
            config: config.clone(),
            maps,
            queue,
            next_id: 0,
            records: Vec::new(),
            warnings: Vec::new(),
            monotone_checks: 0,
            monotone_violations: 0,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn maps(&self) -> &[CurveMap] {
        &self.maps
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn queue(&self) -> impl Iterator<Item = &IntervalDescriptor> {
        self.queue.iter()
    }

    pub fn records(&self) -> &[JobRecord] {
        &self.records
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Takes the first queued interval.
    pub fn pop(&mut self) -> Result<Job, EngineError> {
        self.pop_at(0)
    }

    /// Takes the queued interval at `index`. Any dispatch order leads to the
    /// same final maps.
    pub fn pop_at(&mut self, index: usize) -> Result<Job, EngineError> {
        let desc = self.queue.remove(index).ok_or(EngineError::EmptyQueue)?;
        let map = self
            .maps
            .get(desc.branch)
            .ok_or_else(|| EngineError::Invariant(format!("unknown branch {}", desc.branch)))?;
        let dangling = |e: CurveError| EngineError::Invariant(format!("dangling queue key: {e}"));
        let start = map.lookup(desc.xi_lo).map_err(dangling)?;
        let end = map.lookup(desc.xi_hi).map_err(dangling)?;
        let job = Job {
            id: self.next_id,
            branch: desc.branch,
            xi_lo: desc.xi_lo,
            xi_hi: desc.xi_hi,
            delta_l0: desc.delta_l0,
            w_start: start.w.clone(),
            w_prev: start.w_prev.clone(),
            w_ref: end.w.clone(),
            level: desc.level,
            subintervals: self.config.subintervals,
        };
        self.next_id += 1;
        Ok(job)
    }

    /// Writes a finished job back: interior insertion when both errors are
    /// within tolerance, otherwise stretch insertion with children queued
    /// per the lower/upper rules. A failed job keeps the coarse interval.
    pub fn submit(&mut self, job: &Job, outcome: Result<IntervalResult, String>) -> Result<SubmitAction, EngineError> {
        let interval = job.descriptor();
        let result = match outcome {
            Ok(r) => r,
            Err(reason) => {
                let msg = format!(
                    "job {} on branch {} [{}, {}) failed, keeping coarse data: {reason}",
                    job.id, job.branch, job.xi_lo, job.xi_hi
                );
                log::warn!("{msg}");
                self.warnings.push(msg);
                self.records.push(JobRecord {
                    id: job.id,
                    interval,
                    action: SubmitAction::Failed,
                    errors: None,
                    fine_points: 0,
                    path_length: 0.0,
                    lower_distance: 0.0,
                    closing_distance: 0.0,
                    children_queued: 0,
                    children_capped: 0,
                    failure: Some(reason),
                });
                return Ok(SubmitAction::Failed);
            }
        };
        result.validate()?;
        if result.solutions[0] != job.w_start {
            return Err(EngineError::Invariant(format!("job {} returned a different start point", job.id)));
        }
        let errors = compute_errors(
            interval.delta_l0,
            &result.distances,
            result.lower_distance,
            result.closing_distance,
        );
        let refine = RefineFlags {
            lower: errors.lower > self.config.tol_lower,
            upper: errors.upper > self.config.tol_upper,
        };
        let map = self
            .maps
            .get_mut(interval.branch)
            .ok_or_else(|| EngineError::Invariant(format!("unknown branch {}", interval.branch)))?;
        let (action, mut queued, mut capped) = (SubmitAction::Interior, 0, 0);
        let action = if !refine.lower && !refine.upper {
            map.insert_interior(&interval, &result)?;
            action
        } else {
            for child in map.insert_stretch(&interval, &result, refine)? {
                if child.level > self.config.max_level {
                    capped += 1;
                } else {
                    queued += 1;
                    self.queue.push_back(child);
                }
            }
            SubmitAction::Stretch
        };
        self.monotone_checks += 1;
        if !map.is_monotone() {
            self.monotone_violations += 1;
            log::error!("branch {} lost monotone s/xi after job {}", interval.branch, job.id);
        }
        self.records.push(JobRecord {
            id: job.id,
            interval,
            action,
            errors: Some(errors),
            fine_points: result.distances.len(),
            path_length: result.path_length(),
            lower_distance: result.lower_distance,
            closing_distance: result.closing_distance,
            children_queued: queued,
            children_capped: capped,
            failure: None,
        });
        Ok(action)
    }

    /// Every stored point, branch by branch in ascending `ξ`.
    pub fn collect(&self) -> Vec<CollectedPoint> {
        self.maps.iter().flat_map(|m| m.collect()).collect()
    }

    pub fn is_monotone(&self) -> bool {
        self.maps.iter().all(CurveMap::is_monotone)
    }

    /// Submits audited for strictly increasing `s` and `ξ`, and how many
    /// of them failed.
    pub fn monotonicity_audit(&self) -> (usize, usize) {
        (self.monotone_checks, self.monotone_violations)
    }

    pub fn jobs_per_level(&self) -> BTreeMap<u32, usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry(r.interval.level).or_insert(0) += 1;
        }
        out
    }

    pub fn max_level(&self) -> u32 {
        self.maps.iter().map(CurveMap::max_level).max().unwrap_or(0)
    }
}

/// Single-process queue loop: pop, solve, submit until the queue drains.
pub fn solve_queue(problem: &ProblemDef, alm: &AlmConfig, engine: &mut Engine) -> Result<(), EngineError> {
    while engine.queue_len() > 0 {
        let job = engine.pop()?;
        let outcome = solve_interval(problem, alm, &job).map_err(|e| e.to_string());
        engine.submit(&job, outcome)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct AalmOutput {
    pub serial: SerialOutput,
    pub engine: Engine,
}

impl AalmOutput {
    pub fn points(&self) -> Vec<CollectedPoint> {
        self.engine.collect()
    }
}

/// Serial solve, map initialisation and queue processing in one process.
pub fn aalm(problem: &ProblemDef, alm: &AlmConfig, engine: &EngineConfig) -> Result<AalmOutput, EngineError> {
    let serial = serial_solve(problem, alm, engine)?;
    let mut state = Engine::initialize(&serial, engine)?;
    solve_queue(problem, alm, &mut state)?;
    Ok(AalmOutput { serial, engine: state })
}
