//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use apalm::alm::{AlmConfig, Constraint, SingularKind};
use apalm::curve::CollectedPoint;
use apalm::engine::{self, aalm, Engine, EngineConfig, JobRecord, SubmitAction};
use apalm::io::{compare, scale_harness, Spread};
use apalm::problem::{BuiltinSpec, ProblemDef};
use apalm::runtime::apalm;
use proptest::test_runner::{Config, TestRunner};

/// Job records and monotonicity audits from every run in the suite.
#[derive(Default)]
struct Pool {
    records: Vec<JobRecord>,
    checks: usize,
    violations: usize,
    runs: usize,
}

impl Pool {
    fn absorb(&mut self, e: &Engine) {
        self.records.extend_from_slice(e.records());
        let (c, v) = e.monotonicity_audit();
        self.checks += c;
        self.violations += v;
        self.runs += 1;
    }
}

struct Line {
    id: &'static str,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(line: &Line) {
    let mut out = std::io::stdout().lock();
    let verdict = if line.pass { "PASS" } else { "FAIL" };
    let _ = writeln!(out, "[{verdict}] criterion {:<3} {}: {}", line.id, line.name, line.detail);
    let _ = out.flush();
}

fn crisfield(psi: f64) -> AlmConfig {
    AlmConfig {
        constraint: Constraint::Crisfield,
        psi,
        newton_tol: 1e-10,
        ..AlmConfig::default()
    }
}

fn cubic_engine(tol: f64) -> EngineConfig {
    EngineConfig {
        delta_l: 0.4,
        steps: 15,
        subintervals: 2,
        tol_lower: tol,
        tol_upper: tol,
        ..EngineConfig::default()
    }
}

fn cubic() -> ProblemDef {
    BuiltinSpec::Cubic1d.build().unwrap()
}

fn cubic_residual(p: &CollectedPoint) -> f64 {
    let u = p.w.u[0];
    (p.w.lambda - (u * u * u - 3.0 * u)).abs()
}

fn near_limit(u: f64) -> f64 {
    (u - 1.0).abs().min((u + 1.0).abs())
}

fn analytic_path(pool: &mut Pool, psi: f64, id: &'static str) -> Line {
    let t = Instant::now();
    let out = aalm(&cubic(), &crisfield(psi), &cubic_engine(1e-2)).unwrap();
    let elapsed = t.elapsed();
    pool.absorb(&out.engine);
    let pts = out.points();
    let worst = pts.iter().map(cubic_residual).fold(0.0, f64::max);
    let refined = pts.iter().filter(|p| p.level >= 2).count();
    Line {
        id,
        name: "analytic-path fidelity",
        pass: worst <= 1e-8 && elapsed < Duration::from_secs(1),
        detail: format!(
            "cubic1d Psi={psi}: {} points ({refined} at level >= 2), max |lambda-(u^3-3u)| = {worst:.2e} (<= 1e-8), {:.3}s (< 1s)",
            pts.len(),
            elapsed.as_secs_f64()
        ),
    }
}

/// Discrete curvature of the `(u, λ)` polyline at each interior vertex.
fn curvature(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    points
        .windows(3)
        .map(|w| {
            let (a, b) = ((w[1].0 - w[0].0, w[1].1 - w[0].1), (w[2].0 - w[1].0, w[2].1 - w[1].1));
            let turn = (a.0 * b.1 - a.1 * b.0).atan2(a.0 * b.0 + a.1 * b.1).abs();
            let len = 0.5 * (a.0.hypot(a.1) + b.0.hypot(b.1));
            (w[1].0, turn / len)
        })
        .collect()
}

fn localization(pool: &mut Pool, psi: f64, id: &'static str) -> Line {
    let out = aalm(&cubic(), &crisfield(psi), &cubic_engine(1e-2)).unwrap();
    pool.absorb(&out.engine);
    let refined: Vec<f64> = out.points().iter().filter(|p| p.level >= 2).map(|p| p.w.u[0]).collect();
    let violations = refined.iter().filter(|u| near_limit(**u) > 0.5).count();

    // Dense reference over the same arc length as the adaptive run.
    let dense_cfg = EngineConfig {
        delta_l: 0.01,
        steps: 600,
        ..cubic_engine(1e-2)
    };
    let dense = engine::serial_solve(&cubic(), &crisfield(0.0), &dense_cfg).unwrap();
    let poly: Vec<(f64, f64)> = dense.branches[0].points.iter().map(|w| (w.u[0], w.lambda)).collect();
    let kappa = curvature(&poly);
    let (u_peak, k_peak) = kappa.iter().copied().fold((0.0, 0.0), |m, x| if x.1 > m.1 { x } else { m });
    let k_outside = kappa
        .iter()
        .filter(|(u, _)| near_limit(*u) > 0.5)
        .map(|x| x.1)
        .fold(0.0, f64::max);
    let concentrated = near_limit(u_peak) <= 0.5 && k_outside <= 0.1 * k_peak;
    let need_refined = psi > 0.0;
    Line {
        id,
        name: "adaptivity localization",
        pass: violations == 0 && concentrated && (!need_refined || !refined.is_empty()),
        detail: format!(
            "Psi={psi}: {} points at level >= 2, {violations} outside |u-(+-1)| <= 0.5; dense reference peak curvature {k_peak:.3} at u={u_peak:.3}, max outside windows {k_outside:.3}",
            refined.len()
        ),
    }
}

fn zero_refinement(pool: &mut Pool) -> Line {
    let p = BuiltinSpec::Linear1d { stiffness: 1.0, load: 1.0 }.build().unwrap();
    let mut worst = 0.0f64;
    let mut extra = 0;
    let mut jobs = 0;
    for psi in [0.0, 1.0] {
        let cfg = EngineConfig {
            delta_l: 0.7,
            steps: 12,
            ..EngineConfig::default()
        };
        let out = aalm(&p, &crisfield(psi), &cfg).unwrap();
        pool.absorb(&out.engine);
        for r in out.engine.records() {
            let e = r.errors.expect("linear job failed");
            worst = worst.max(e.total.abs()).max(e.lower.abs()).max(e.upper.abs());
            extra += r.children_queued + r.children_capped;
        }
        jobs += out.engine.records().len();
        extra += out.engine.records().len() - cfg.steps;
    }
    Line {
        id: "3",
        name: "zero-refinement control",
        pass: worst <= 1e-12 && extra == 0,
        detail: format!("linear1d Psi in {{0,1}}: {jobs} jobs, max |eps|,|eps_l|,|eps_u| = {worst:.2e} (<= 1e-12), {extra} extra children"),
    }
}

fn worker_independence(pool: &mut Pool, psi: f64, id: &'static str) -> Line {
    let t = Instant::now();
    let alm = crisfield(psi);
    let cfg = cubic_engine(if psi > 0.0 { 1e-4 } else { 1e-2 });
    let reference = aalm(&cubic(), &alm, &cfg).unwrap();
    pool.absorb(&reference.engine);
    let base = reference.points();
    let mut worst = 0.0f64;
    let mut keys_ok = true;
    let mut bitwise = true;
    for workers in [1, 2, 4, 8] {
        let out = apalm(&cubic(), &alm, &cfg, workers).unwrap();
        pool.absorb(&out.engine);
        let r = compare(&base, &out.engine.collect(), 1e-9);
        keys_ok &= r.keys_equal;
        bitwise &= r.bitwise_identical;
        worst = worst.max(r.max_deviation);
    }
    let elapsed = t.elapsed();
    Line {
        id,
        name: "worker-count independence",
        pass: keys_ok && worst <= 1e-9 && elapsed < Duration::from_secs(10),
        detail: format!(
            "cubic1d Psi={psi}, workers 1,2,4,8 vs serial AALM ({} points): keys equal {keys_ok}, max deviation {worst:.1e}, bitwise {bitwise}, {:.2}s (< 10s)",
            base.len(),
            elapsed.as_secs_f64()
        ),
    }
}

fn bifurcation(pool: &mut Pool) -> Line {
    let p = BuiltinSpec::Pitchfork.build().unwrap();
    let alm = AlmConfig {
        newton_tol: 1e-12,
        bif_tol: 1e-4,
        ..crisfield(1.0)
    };
    let cfg = EngineConfig {
        delta_l: 0.3,
        steps: 8,
        tol_lower: 1e-3,
        tol_upper: 1e-3,
        bifurcation: true,
        branch_delta_l: Some(0.2),
        branch_steps: Some(8),
        ..EngineConfig::default()
    };
    let out = apalm(&p, &alm, &cfg, 4).unwrap();
    pool.absorb(&out.engine);
    let located: Vec<_> = out
        .serial
        .singularities
        .iter()
        .filter(|s| s.located.kind == SingularKind::Bifurcation)
        .collect();
    let lambda_err = located.first().map_or(f64::INFINITY, |s| (s.located.point.lambda - 1.0).abs());
    let secondary: Vec<_> = out.engine.collect().into_iter().filter(|q| q.branch == 1).collect();
    let worst = secondary
        .iter()
        .map(|q| (q.w.u[0] * q.w.u[0] - (q.w.lambda - 1.0)).abs())
        .fold(0.0, f64::max);
    let branches_served: BTreeMap<usize, usize> = out.stats.dispatch_log.iter().fold(BTreeMap::new(), |mut m, d| {
        *m.entry(d.branch).or_insert(0) += 1;
        m
    });
    Line {
        id: "6",
        name: "bifurcation handling",
        pass: located.len() == 1 && lambda_err <= alm.bif_tol && secondary.len() > 1 && worst <= 1e-8,
        detail: format!(
            "pitchfork: bifurcation at lambda = 1 {:+.1e} (<= 1e-4), {} secondary points with max |u^2-(lambda-1)| = {worst:.1e} (<= 1e-8), jobs per branch {branches_served:?}",
            lambda_err,
            secondary.len()
        ),
    }
}

/// Every coarse point at a level both runs reach must reappear unchanged in
/// the fine run, in the same order along its branch.
fn refinement_compatible(coarse: &[CollectedPoint], fine: &[CollectedPoint], shared: u32) -> (usize, usize, usize, bool) {
    let index: HashMap<(usize, Vec<u64>, u64), usize> = fine
        .iter()
        .enumerate()
        .map(|(i, p)| ((p.branch, p.w.u.iter().map(|x| x.to_bits()).collect(), p.w.lambda.to_bits()), i))
        .collect();
    let (mut checked, mut missing, mut same_key) = (0, 0, 0);
    let mut ordered = true;
    let mut last: Option<(usize, usize)> = None;
    for p in coarse.iter().filter(|p| p.level <= shared) {
        checked += 1;
        let key = (p.branch, p.w.u.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), p.w.lambda.to_bits());
        match index.get(&key) {
            Some(&i) => {
                if fine[i].xi.to_bits() == p.xi.to_bits() {
                    same_key += 1;
                }
                if let Some((b, j)) = last {
                    ordered &= b != p.branch || j < i;
                }
                last = Some((p.branch, i));
            }
            None => missing += 1,
        }
    }
    (checked, missing, same_key, ordered)
}

fn tolerance_monotonicity(pool: &mut Pool, psi: f64, id: &'static str) -> Line {
    let coarse = aalm(&cubic(), &crisfield(psi), &cubic_engine(1e-2)).unwrap();
    let fine = aalm(&cubic(), &crisfield(psi), &cubic_engine(1e-4)).unwrap();
    pool.absorb(&coarse.engine);
    pool.absorb(&fine.engine);
    let (cp, fp) = (coarse.points(), fine.points());
    let shared = coarse.engine.max_level().min(fine.engine.max_level());
    let (checked, missing, same_key, ordered) = refinement_compatible(&cp, &fp, shared);
    Line {
        id,
        name: "tolerance monotonicity",
        pass: fp.len() >= cp.len() && missing == 0 && ordered,
        detail: format!(
            "cubic1d Psi={psi}: TOL 1e-4 -> {} points, TOL 1e-2 -> {} points; {checked} coarse points at level <= {shared}: {missing} missing from the fine run, order preserved {ordered}, {same_key} with identical xi key",
            fp.len(),
            cp.len()
        ),
    }
}

fn scaling(pool: &mut Pool) -> Line {
    let t = Instant::now();
    let p = BuiltinSpec::Springchain {
        n: 64,
        coupling: 0.5,
        load: 1.0,
    }
    .build()
    .unwrap()
    .with_step_work(Duration::from_millis(20));
    let alm = AlmConfig {
        psi: 0.0,
        ..AlmConfig::default()
    };
    let cfg = EngineConfig {
        delta_l: 0.05,
        steps: 64,
        tol_lower: 1e-2,
        tol_upper: 1e-2,
        ..EngineConfig::default()
    };
    let counts = [1, 4, 64, 128];
    let mut max_jobs = 0;
    let rows = scale_harness(&counts, 5, |w| {
        let out = apalm(&p, &alm, &cfg, w)?;
        pool.absorb(&out.engine);
        max_jobs = max_jobs.max(out.engine.records().len());
        Ok(out)
    })
    .unwrap();
    let mean = |w: usize| rows.iter().find(|r| r.workers == w).map(|r| r.parallel.mean).unwrap();
    let (t1, t4, t64, t128) = (mean(1), mean(4), mean(64), mean(128));
    let elapsed = t.elapsed();
    let spread: Vec<String> = rows
        .iter()
        .map(|r| {
            let Spread { mean, min, max } = r.parallel;
            format!("{}w {mean:.3}s [{min:.3},{max:.3}]", r.workers)
        })
        .collect();
    Line {
        id: "8",
        name: "scaling property",
        pass: rows[0].initial_intervals >= 64
            && t4 <= 0.6 * t1
            && max_jobs <= 128
            && t128 >= 0.9 * t64
            && elapsed < Duration::from_secs(120),
        detail: format!(
            "springchain(64), {} initial intervals, <= {max_jobs} jobs, 20 ms/step: {}; 4w/1w = {:.3} (<= 0.6), 128w/64w = {:.3} (>= 0.9), {:.1}s (< 120s)",
            rows[0].initial_intervals,
            spread.join(", "),
            t4 / t1,
            t128 / t64,
            elapsed.as_secs_f64()
        ),
    }
}

fn random_dispatch_orders(pool: &mut Pool) -> (usize, usize) {
    let p = cubic();
    let alm = crisfield(1.0);
    let cfg = cubic_engine(1e-3);
    let serial = engine::serial_solve(&p, &alm, &cfg).unwrap();
    let mut runner = TestRunner::new_with_rng(
        Config {
            cases: 16,
            failure_persistence: None,
            ..Config::default()
        },
        proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha),
    );
    let cases = Cell::new(0);
    let broken = Cell::new(0);
    let shared = RefCell::new(std::mem::take(pool));
    let strategy = proptest::collection::vec(0usize..1024, 0..400);
    runner
        .run(&strategy, |order| {
            let mut e = Engine::initialize(&serial, &cfg).unwrap();
            let mut i = 0;
            let mut bad = 0;
            while e.queue_len() > 0 {
                let pick = order.get(i).copied().unwrap_or(0) % e.queue_len();
                i += 1;
                let job = e.pop_at(pick).unwrap();
                let res = engine::solve_interval(&p, &alm, &job).map_err(|x| x.to_string());
                e.submit(&job, res).unwrap();
                if !e.is_monotone() {
                    bad += 1;
                }
            }
            cases.set(cases.get() + 1);
            broken.set(broken.get() + usize::from(bad > 0));
            shared.borrow_mut().absorb(&e);
            Ok(())
        })
        .unwrap();
    *pool = shared.into_inner();
    (cases.get(), broken.get())
}

fn main() -> ExitCode {
    let started = Instant::now();
    let mut pool = Pool::default();
    let mut lines = Vec::new();
    let run = |line: Line| {
        report(&line);
        line.pass
    };

    lines.push(run(analytic_path(&mut pool, 0.0, "1")));
    lines.push(run(analytic_path(&mut pool, 1.0, "1b")));
    lines.push(run(localization(&mut pool, 0.0, "2")));
    lines.push(run(localization(&mut pool, 1.0, "2b")));
    lines.push(run(zero_refinement(&mut pool)));
    lines.push(run(worker_independence(&mut pool, 0.0, "5")));
    lines.push(run(worker_independence(&mut pool, 1.0, "5b")));
    lines.push(run(bifurcation(&mut pool)));
    lines.push(run(tolerance_monotonicity(&mut pool, 0.0, "7")));
    lines.push(run(tolerance_monotonicity(&mut pool, 1.0, "7b")));
    lines.push(run(scaling(&mut pool)));
    let (cases, broken) = random_dispatch_orders(&mut pool);

    let finished: Vec<&JobRecord> = pool.records.iter().filter(|r| r.action != SubmitAction::Failed).collect();
    let negative_closing = finished.iter().filter(|r| !(r.closing_distance >= 0.0)).count();
    let chord_excess = finished
        .iter()
        .map(|r| r.lower_distance - (r.path_length + 1e-12))
        .fold(f64::NEG_INFINITY, f64::max);
    let chord_violations = finished.iter().filter(|r| r.lower_distance > r.path_length + 1e-12).count();
    lines.push(run(Line {
        id: "4",
        name: "triangle-inequality suite",
        pass: finished.len() >= 500 && negative_closing == 0 && chord_violations == 0,
        detail: format!(
            "{} jobs over {} runs (>= 500): {negative_closing} with negative closing distance, {chord_violations} with lower distance > sum d_k + 1e-12 (max excess {chord_excess:.1e})",
            finished.len(),
            pool.runs
        ),
    }));
    lines.push(run(Line {
        id: "9",
        name: "monotone parameterization",
        pass: pool.checks > 0 && pool.violations == 0 && broken == 0,
        detail: format!(
            "{} submits audited over {} runs, {} with non-increasing s or xi; {cases} random dispatch orders, {broken} broken",
            pool.checks, pool.runs, pool.violations
        ),
    }));

    let failed = lines.iter().filter(|p| !**p).count();
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "acceptance: {} of {} criteria passed in {:.1}s",
        lines.len() - failed,
        lines.len(),
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
