//! Arc-length stepping: predictor, Newton corrector under the Riks or
//! Crisfield constraint, step cutting, and singular-point tooling used by
//! the serial phase.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problem::{Increment, ProblemDef, ProblemError, SolutionPoint};

/// Constraint residuals must vanish to this fraction of `ΔL²`.
pub const CONSTRAINT_REL_TOL: f64 = 1e-10;
const PIVOT_REL_TOL: f64 = 1e-14;
const MAX_BISECTIONS: usize = 200;
/// Singular values within this factor of the smallest one count toward the
/// null space.
const NULL_CLUSTER_RATIO: f64 = 10.0;
/// `|ψᵀ ∂G/∂λ| / ‖∂G/∂λ‖` above this marks a limit point rather than a
/// bifurcation.
const RANGE_REL_TOL: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlmError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("predictor failure: {0}")]
    Predictor(String),
    #[error("singular bordered system")]
    SingularSystem,
    #[error("complex roots in the Crisfield quadratic")]
    ComplexRoots,
    #[error("degenerate Crisfield quadratic")]
    DegenerateQuadratic,
    #[error("newton did not converge in {iterations} iterations (|G| = {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("newton iteration diverged")]
    Diverged,
    #[error("step failed after {cuts} cuts: {last}")]
    StepFailed { cuts: usize, last: Box<AlmError> },
    #[error("branch switch refused: {0}")]
    BranchSwitchRefused(String),
    #[error("singular point could not be located: {0}")]
    Unlocatable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Constraint {
    Riks,
    Crisfield,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlmConfig {
    pub constraint: Constraint,
    pub psi: f64,
    pub newton_tol: f64,
    pub max_newton_iters: usize,
    pub max_step_cuts: usize,
    pub bif_tol: f64,
    pub branch_perturbation: f64,
}

impl Default for AlmConfig {
    fn default() -> Self {
        Self {
            constraint: Constraint::Crisfield,
            psi: 1.0,
            newton_tol: 1e-10,
            max_newton_iters: 25,
            max_step_cuts: 5,
            bif_tol: 1e-4,
            branch_perturbation: 1e-4,
        }
    }
}

impl AlmConfig {
    pub fn validate(&self) -> Result<(), AlmError> {
        let bad = |key: &str, why: &str| Err(AlmError::InvalidInput(format!("alm.{key} {why}")));
        if !(self.psi.is_finite() && self.psi >= 0.0) {
            return bad("psi", "must be finite and >= 0");
        }
        if !(self.newton_tol.is_finite() && self.newton_tol > 0.0) {
            return bad("newton_tol", "must be > 0");
        }
        if self.max_newton_iters < 1 {
            return bad("max_newton_iters", "must be >= 1");
        }
        if !(self.bif_tol.is_finite() && self.bif_tol > 0.0) {
            return bad("bif_tol", "must be > 0");
        }
        if !(self.branch_perturbation.is_finite() && self.branch_perturbation > 0.0) {
            return bad("branch_perturbation", "must be > 0");
        }
        Ok(())
    }

    pub fn metric(&self, problem: &ProblemDef) -> Result<Metric, AlmError> {
        Metric::new(self.psi, problem.load_norm_sq())
    }
}

/// Weighted Euclidean norm `√(ΔuᵀΔu + Ψ²Δλ²PᵀP)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metric {
    lambda_weight: f64,
}

impl Metric {
    pub fn new(psi: f64, load_norm_sq: f64) -> Result<Self, AlmError> {
        if !(load_norm_sq >= 0.0) {
            return Err(AlmError::InvalidInput(format!(
                "load_norm_sq must be >= 0, got {load_norm_sq}"
            )));
        }
        if !(psi >= 0.0) {
            return Err(AlmError::InvalidInput(format!("psi must be >= 0, got {psi}")));
        }
        Ok(Self {
            lambda_weight: psi * psi * load_norm_sq,
        })
    }

    /// `Ψ²PᵀP`.
    pub fn lambda_weight(&self) -> f64 {
        self.lambda_weight
    }

    pub fn length_sq(&self, inc: &Increment) -> f64 {
        inc.du.norm_squared() + self.lambda_weight * inc.dlambda * inc.dlambda
    }

    pub fn length(&self, inc: &Increment) -> f64 {
        self.length_sq(inc).sqrt()
    }

    pub fn between(&self, a: &SolutionPoint, b: &SolutionPoint) -> f64 {
        self.length(&a.delta_from(b))
    }

    fn inner(&self, a: &Increment, b: &Increment) -> f64 {
        a.du.dot(&b.du) + self.lambda_weight * a.dlambda * b.dlambda
    }
}

pub fn distance(
    delta_u: &DVector<f64>,
    delta_lambda: f64,
    psi: f64,
    load_norm_sq: f64,
) -> Result<f64, AlmError> {
    let metric = Metric::new(psi, load_norm_sq)?;
    Ok(metric.length(&Increment::new(delta_u.clone(), delta_lambda)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub w_new: SolutionPoint,
    pub iterations: usize,
    pub cuts_used: usize,
    pub achieved_length: f64,
}

impl StepResult {
    /// Fraction of the requested length this step was allowed to cover
    /// (`2^-cuts`).
    pub fn nominal_fraction(&self) -> f64 {
        0.5f64.powi(self.cuts_used as i32)
    }
}

/// Predictor increment of metric length `delta_l`.
///
/// A warm start rescales `prev`. A cold start (`prev` absent or of zero
/// length) follows the tangent `K⁻¹P` with `Δλ > 0`.
pub fn predictor(
    problem: &ProblemDef,
    metric: &Metric,
    w_curr: &SolutionPoint,
    prev: Option<&Increment>,
    delta_l: f64,
) -> Result<Increment, AlmError> {
    if !(delta_l.is_finite() && delta_l > 0.0) {
        return Err(AlmError::InvalidInput(format!("delta_L must be > 0, got {delta_l}")));
    }
    let dir = unit_direction(problem, metric, w_curr, prev)?;
    Ok(dir.scaled(delta_l))
}

fn unit_direction(
    problem: &ProblemDef,
    metric: &Metric,
    w_curr: &SolutionPoint,
    prev: Option<&Increment>,
) -> Result<Increment, AlmError> {
    if let Some(prev) = prev {
        if prev.du.len() != problem.n_dof() {
            return Err(ProblemError::Dimension {
                expected: problem.n_dof(),
                actual: prev.du.len(),
            }
            .into());
        }
        let len = metric.length(prev);
        if len > 0.0 && len.is_finite() {
            return Ok(prev.scaled(1.0 / len));
        }
    }
    let k = problem.jacobian_u(w_curr)?;
    let load = -problem.jacobian_lambda(w_curr)?;
    let du = k
        .lu()
        .solve(&load)
        .filter(|x| x.iter().all(|v| v.is_finite()))
        .ok_or_else(|| AlmError::Predictor("singular stiffness at cold start".into()))?;
    let tangent = Increment::new(du, 1.0);
    let len = metric.length(&tangent);
    if !(len > 0.0 && len.is_finite()) {
        return Err(AlmError::Predictor("tangent has zero metric length".into()));
    }
    Ok(tangent.scaled(1.0 / len))
}

/// Index of the Crisfield root that keeps moving forward: the candidate
/// total increment with the largest projection on the previous one. Ties go
/// to the larger `δλ`.
pub fn select_root(roots: [f64; 2], delta_u_old: &DVector<f64>, candidates: [&DVector<f64>; 2]) -> usize {
    let p0 = delta_u_old.dot(candidates[0]);
    let p1 = delta_u_old.dot(candidates[1]);
    let scale = p0.abs().max(p1.abs());
    if (p0 - p1).abs() <= 1e-12 * scale || p0 == p1 {
        if roots[1] > roots[0] {
            1
        } else {
            0
        }
    } else if p1 > p0 {
        1
    } else {
        0
    }
}

/// Real roots of `a t² + b t + c = 0`, smaller first.
fn quadratic_roots(a: f64, b: f64, c: f64) -> Result<[f64; 2], AlmError> {
    if !(a > 0.0) || !a.is_finite() {
        return Err(AlmError::DegenerateQuadratic);
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return Err(AlmError::ComplexRoots);
    }
    let sq = disc.sqrt();
    let q = -0.5 * (b + b.signum() * sq);
    let (r0, r1) = if q == 0.0 {
        (0.0, 0.0)
    } else {
        (q / a, c / q)
    };
    Ok(if r0 <= r1 { [r0, r1] } else { [r1, r0] })
}

fn bordered(k: &DMatrix<f64>, g: &DVector<f64>, row_u: &DVector<f64>, row_l: f64) -> DMatrix<f64> {
    let n = k.nrows();
    let mut a = DMatrix::zeros(n + 1, n + 1);
    a.view_mut((0, 0), (n, n)).copy_from(k);
    a.view_mut((0, n), (n, 1)).copy_from(g);
    a.view_mut((n, 0), (1, n)).copy_from(&row_u.transpose());
    a[(n, n)] = row_l;
    a
}

fn split(x: &DVector<f64>) -> Increment {
    let n = x.len() - 1;
    Increment::new(x.rows(0, n).into_owned(), x[n])
}

fn solve_checked(lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>, rhs: &DVector<f64>) -> Result<DVector<f64>, AlmError> {
    lu.solve(rhs)
        .filter(|x| x.iter().all(|v| v.is_finite()))
        .ok_or(AlmError::SingularSystem)
}

/// Squared-form constraint residual of the current total increment.
fn constraint_residual(constraint: Constraint, metric: &Metric, dw: &Increment, dw0: &Increment, len: f64) -> f64 {
    match constraint {
        Constraint::Crisfield => metric.length_sq(dw) - len * len,
        Constraint::Riks => metric.inner(dw0, dw) - len * len,
    }
}

fn correct(
    problem: &ProblemDef,
    config: &AlmConfig,
    metric: &Metric,
    w_i: &SolutionPoint,
    dw0: &Increment,
    len: f64,
) -> Result<(SolutionPoint, usize), AlmError> {
    let mut dw = dw0.clone();
    let mut w = w_i.advanced(&dw);
    let n = problem.n_dof();
    let mut residual = f64::INFINITY;
    for iter in 0..=config.max_newton_iters {
        let r = problem.residual(&w)?;
        residual = r.norm();
        if !residual.is_finite() {
            return Err(AlmError::Diverged);
        }
        let f = constraint_residual(config.constraint, metric, &dw, dw0, len);
        if residual <= config.newton_tol && f.abs() <= CONSTRAINT_REL_TOL * len * len {
            return Ok((w, iter));
        }
        if iter == config.max_newton_iters {
            break;
        }
        let k = problem.jacobian_u(&w)?;
        let g = problem.jacobian_lambda(&w)?;
        let delta = match config.constraint {
            Constraint::Riks => {
                let a = bordered(&k, &g, &dw0.du, metric.lambda_weight() * dw0.dlambda);
                let mut rhs = DVector::zeros(n + 1);
                rhs.rows_mut(0, n).copy_from(&(-&r));
                rhs[n] = -f;
                split(&solve_checked(&a.lu(), &rhs)?)
            }
            Constraint::Crisfield => {
                // The linearised residual fixes δw up to one free parameter
                // t along the tangent; the sphere fixes t.
                let a = bordered(&k, &g, &dw.du, dw.dlambda);
                let lu = a.lu();
                let mut rhs = DVector::zeros(n + 1);
                rhs.rows_mut(0, n).copy_from(&(-&r));
                let part = split(&solve_checked(&lu, &rhs)?);
                let mut e = DVector::zeros(n + 1);
                e[n] = 1.0;
                let tan = split(&solve_checked(&lu, &e)?);
                let base = Increment::new(&dw.du + &part.du, dw.dlambda + part.dlambda);
                let qa = metric.length_sq(&tan);
                let qb = 2.0 * metric.inner(&base, &tan);
                let qc = metric.length_sq(&base) - len * len;
                let ts = quadratic_roots(qa, qb, qc)?;
                let cand: Vec<Increment> = ts
                    .iter()
                    .map(|&t| Increment::new(&part.du + &tan.du * t, part.dlambda + tan.dlambda * t))
                    .collect();
                let totals: Vec<DVector<f64>> = cand.iter().map(|c| &dw.du + &c.du).collect();
                let pick = select_root(
                    [cand[0].dlambda, cand[1].dlambda],
                    &dw.du,
                    [&totals[0], &totals[1]],
                );
                cand[pick].clone()
            }
        };
        dw = Increment::new(&dw.du + &delta.du, dw.dlambda + delta.dlambda);
        w = w_i.advanced(&dw);
    }
    Err(AlmError::NotConverged {
        iterations: config.max_newton_iters,
        residual,
    })
}

/// One arc-length step of metric length `delta_l` from the converged point
/// `w_i`, halving the length on failure up to `max_step_cuts` times.
pub fn step(
    problem: &ProblemDef,
    config: &AlmConfig,
    w_i: &SolutionPoint,
    prev: Option<&Increment>,
    delta_l: f64,
) -> Result<StepResult, AlmError> {
    if !(delta_l.is_finite() && delta_l > 0.0) {
        return Err(AlmError::InvalidInput(format!("delta_L must be > 0, got {delta_l}")));
    }
    let metric = config.metric(problem)?;
    problem.residual(w_i)?;
    let dir = unit_direction(problem, &metric, w_i, prev)?;
    let mut last = AlmError::SingularSystem;
    for cut in 0..=config.max_step_cuts {
        let len = delta_l * 0.5f64.powi(cut as i32);
        match correct(problem, config, &metric, w_i, &dir.scaled(len), len) {
            Ok((w_new, iterations)) => {
                let work = problem.step_work();
                if !work.is_zero() {
                    std::thread::sleep(work);
                }
                let achieved_length = metric.between(&w_new, w_i);
                return Ok(StepResult {
                    w_new,
                    iterations,
                    cuts_used: cut,
                    achieved_length,
                });
            }
            Err(AlmError::Problem(e)) => return Err(e.into()),
            Err(e) => last = e,
        }
    }
    Err(AlmError::StepFailed {
        cuts: config.max_step_cuts,
        last: Box::new(last),
    })
}

/// Sign of `det K` and the pivot signs of its factorization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stability {
    pub det_sign: i8,
    pub determinant: f64,
    pub non_positive_pivots: usize,
    pub singular: bool,
}

/// LDLᵀ for symmetric `K` (pivot signs give the inertia), LU otherwise.
/// A vanishing pivot reports the point as singular.
pub fn detect_singular(problem: &ProblemDef, w: &SolutionPoint) -> Result<Stability, AlmError> {
    let k = problem.jacobian_u(w)?;
    Ok(stability_of(&k))
}

fn stability_of(k: &DMatrix<f64>) -> Stability {
    let n = k.nrows();
    let scale = k.amax().max(f64::MIN_POSITIVE);
    let symmetric = (k - k.transpose()).amax() <= 1e-12 * scale;
    let pivots: Vec<f64> = if symmetric {
        ldlt_pivots(k)
    } else {
        let lu = k.clone().lu();
        let perm_sign = lu.p().determinant::<f64>();
        let mut d: Vec<f64> = lu.u().diagonal().iter().copied().collect();
        if perm_sign < 0.0 && !d.is_empty() {
            d[0] = -d[0];
        }
        d
    };
    let breakdown = pivots.len() < n || pivots.iter().any(|p| p.abs() <= PIVOT_REL_TOL * scale);
    let determinant: f64 = if breakdown { 0.0 } else { pivots.iter().product() };
    let non_positive_pivots = pivots.iter().filter(|p| **p <= PIVOT_REL_TOL * scale).count() + (n - pivots.len());
    Stability {
        det_sign: if breakdown { 0 } else { determinant.signum() as i8 },
        determinant,
        non_positive_pivots,
        singular: breakdown,
    }
}

/// Diagonal of `D` in `K = LDLᵀ` without pivoting; stops early on a zero
/// pivot.
fn ldlt_pivots(k: &DMatrix<f64>) -> Vec<f64> {
    let n = k.nrows();
    let mut l = DMatrix::<f64>::identity(n, n);
    let mut d = Vec::with_capacity(n);
    for j in 0..n {
        let mut dj = k[(j, j)];
        for m in 0..j {
            dj -= l[(j, m)] * l[(j, m)] * d[m];
        }
        d.push(dj);
        if dj == 0.0 {
            break;
        }
        for i in j + 1..n {
            let mut v = k[(i, j)];
            for m in 0..j {
                v -= l[(i, m)] * l[(j, m)] * d[m];
            }
            l[(i, j)] = v / dj;
        }
    }
    d
}

/// Path tangent at `w`, normalised so that its plain dot product with
/// `orientation` is one.
pub fn tangent(problem: &ProblemDef, w: &SolutionPoint, orientation: &Increment) -> Result<Increment, AlmError> {
    let k = problem.jacobian_u(w)?;
    let g = problem.jacobian_lambda(w)?;
    let n = k.nrows();
    let a = bordered(&k, &g, &orientation.du, orientation.dlambda);
    let mut e = DVector::zeros(n + 1);
    e[n] = 1.0;
    Ok(split(&solve_checked(&a.lu(), &e)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SingularKind {
    Limit,
    Bifurcation,
}

/// Limit points flip the sign of the tangent's `λ` component across the
/// bracket; bifurcations on a smooth branch do not.
pub fn classify_singularity(
    problem: &ProblemDef,
    w_a: &SolutionPoint,
    w_b: &SolutionPoint,
) -> Result<SingularKind, AlmError> {
    let chord = w_b.delta_from(w_a);
    let ta = tangent(problem, w_a, &chord)?;
    let tb = tangent(problem, w_b, &chord)?;
    if ta.dlambda * tb.dlambda < 0.0 {
        Ok(SingularKind::Limit)
    } else {
        Ok(SingularKind::Bifurcation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocatedSingularity {
    pub point: SolutionPoint,
    pub kind: SingularKind,
    /// Metric length of the final bracket.
    pub bracket_length: f64,
}

/// Bisects on arc length between `w_a` and `w_b` (re-stepping from the left
/// end) until the bracket is no longer than `bif_tol`, then takes one
/// regula-falsi step on `det K` inside the final bracket.
pub fn locate_bifurcation(
    problem: &ProblemDef,
    config: &AlmConfig,
    w_a: &SolutionPoint,
    w_b: &SolutionPoint,
) -> Result<LocatedSingularity, AlmError> {
    let metric = config.metric(problem)?;
    let sa = detect_singular(problem, w_a)?;
    if sa.singular {
        let kind = classify_singularity(problem, w_a, w_b).unwrap_or(SingularKind::Bifurcation);
        return Ok(LocatedSingularity {
            point: w_a.clone(),
            kind,
            bracket_length: 0.0,
        });
    }
    let sb = detect_singular(problem, w_b)?;
    if sb.singular {
        let kind = classify_singularity(problem, w_a, w_b).unwrap_or(SingularKind::Bifurcation);
        return Ok(LocatedSingularity {
            point: w_b.clone(),
            kind,
            bracket_length: 0.0,
        });
    }
    if sa.det_sign == sb.det_sign {
        return Err(AlmError::Unlocatable("no sign change of det K across the bracket".into()));
    }
    let kind = classify_singularity(problem, w_a, w_b)
        .map_err(|e| AlmError::Unlocatable(format!("tangent: {e}")))?;

    let (mut lo, mut hi) = (w_a.clone(), w_b.clone());
    let (mut det_lo, mut det_hi) = (sa.determinant, sb.determinant);
    let mut dir = hi.delta_from(&lo);
    let mut len = metric.between(&hi, &lo);
    let mut iterations = 0;
    while len > config.bif_tol {
        iterations += 1;
        if iterations > MAX_BISECTIONS {
            return Err(AlmError::Unlocatable("bisection did not shrink the bracket".into()));
        }
        let mid = step(problem, config, &lo, Some(&dir), 0.5 * len)
            .map_err(|e| AlmError::Unlocatable(format!("bisection step: {e}")))?
            .w_new;
        let sm = detect_singular(problem, &mid)?;
        if sm.singular {
            return Ok(LocatedSingularity {
                point: mid,
                kind,
                bracket_length: 0.0,
            });
        }
        if sm.det_sign == sa.det_sign {
            dir = mid.delta_from(&lo);
            lo = mid;
            det_lo = sm.determinant;
        } else {
            hi = mid;
            det_hi = sm.determinant;
        }
        let next = metric.between(&hi, &lo);
        if !(next < len) {
            return Err(AlmError::Unlocatable("bisection lost the sign change".into()));
        }
        len = next;
    }

    let mut best = if det_lo.abs() <= det_hi.abs() {
        (lo.clone(), det_lo.abs())
    } else {
        (hi.clone(), det_hi.abs())
    };
    let frac = det_lo / (det_lo - det_hi);
    if frac > 0.0 && frac < 1.0 && len > 0.0 {
        if let Ok(res) = step(problem, config, &lo, Some(&hi.delta_from(&lo)), frac * len) {
            let s = detect_singular(problem, &res.w_new)?;
            if s.determinant.abs() < best.1 && metric.between(&res.w_new, &lo) <= len {
                best = (res.w_new, s.determinant.abs());
            }
        }
    }
    Ok(LocatedSingularity {
        point: best.0,
        kind,
        bracket_length: len,
    })
}

/// Branch predictor `(τφ, 0)` along the unit null vector `φ` of `K(w*)`.
/// Refused unless the null space is one-dimensional and `∂G/∂λ` lies in the
/// range of `K` (otherwise `w*` is a limit point and needs no switch).
pub fn branch_switch(problem: &ProblemDef, w_star: &SolutionPoint, tau: f64) -> Result<Increment, AlmError> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(AlmError::InvalidInput(format!("tau must be > 0, got {tau}")));
    }
    let k = problem.jacobian_u(w_star)?;
    let g = problem.jacobian_lambda(w_star)?;
    let svd = k.svd(true, true);
    let sv = &svd.singular_values;
    let (imin, smin) = sv
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, s)| (i, *s))
        .ok_or_else(|| AlmError::BranchSwitchRefused("empty system".into()))?;
    let smax = sv.max();
    let floor = NULL_CLUSTER_RATIO * smin + 1e-12 * smax;
    let null_dim = sv.iter().filter(|s| **s <= floor).count();
    if null_dim != 1 {
        return Err(AlmError::BranchSwitchRefused(format!(
            "null space dimension {null_dim}, expected 1"
        )));
    }
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
    let psi = u.column(imin).into_owned();
    let gnorm = g.norm();
    if gnorm > 0.0 && psi.dot(&g).abs() > RANGE_REL_TOL * gnorm {
        return Err(AlmError::BranchSwitchRefused(
            "load vector not in the range of K (limit point)".into(),
        ));
    }
    let mut phi = v_t.row(imin).transpose().into_owned();
    phi /= phi.norm();
    let lead = phi.iamax();
    if phi[lead] < 0.0 {
        phi = -phi;
    }
    Ok(Increment::new(phi * tau, 0.0))
}
