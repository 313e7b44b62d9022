//! Nonlinear systems `G(u, λ) = 0` and the built-in benchmark problems.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("dimension mismatch: expected {expected} unknowns, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("unknown builtin problem `{0}`")]
    UnknownBuiltin(String),
    #[error("invalid parameter `{name}` for builtin `{problem}`: {reason}")]
    InvalidParameter {
        problem: String,
        name: String,
        reason: String,
    },
}

/// One point `w = (u, λ)` in solution space.
#[derive(Clone, Debug, PartialEq)]
pub struct SolutionPoint {
    pub u: DVector<f64>,
    pub lambda: f64,
}

impl SolutionPoint {
    pub fn new(u: DVector<f64>, lambda: f64) -> Self {
        Self { u, lambda }
    }

    pub fn from_slice(u: &[f64], lambda: f64) -> Self {
        Self::new(DVector::from_column_slice(u), lambda)
    }

    pub fn origin(n_dof: usize) -> Self {
        Self::new(DVector::zeros(n_dof), 0.0)
    }

    pub fn n_dof(&self) -> usize {
        self.u.len()
    }

    /// `self - other` as an increment.
    pub fn delta_from(&self, other: &SolutionPoint) -> Increment {
        Increment {
            du: &self.u - &other.u,
            dlambda: self.lambda - other.lambda,
        }
    }

    pub fn advanced(&self, inc: &Increment) -> SolutionPoint {
        SolutionPoint {
            u: &self.u + &inc.du,
            lambda: self.lambda + inc.dlambda,
        }
    }
}

/// An increment `Δw = (Δu, Δλ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Increment {
    pub du: DVector<f64>,
    pub dlambda: f64,
}

impl Increment {
    pub fn new(du: DVector<f64>, dlambda: f64) -> Self {
        Self { du, dlambda }
    }

    pub fn zeros(n_dof: usize) -> Self {
        Self::new(DVector::zeros(n_dof), 0.0)
    }

    pub fn scaled(&self, factor: f64) -> Increment {
        Increment {
            du: &self.du * factor,
            dlambda: self.dlambda * factor,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.dlambda == 0.0 && self.du.iter().all(|x| *x == 0.0)
    }
}

/// The evaluators behind a nonlinear problem. Implementations must be pure
/// functions of `(u, λ)`; callers guarantee `u.len() == n_dof()`.
pub trait Model: Send + Sync + fmt::Debug {
    fn n_dof(&self) -> usize;
    fn residual(&self, u: &DVector<f64>, lambda: f64) -> DVector<f64>;
    fn jacobian_u(&self, u: &DVector<f64>, lambda: f64) -> DMatrix<f64>;
    fn jacobian_lambda(&self, u: &DVector<f64>, lambda: f64) -> DVector<f64>;
    /// `PᵀP` as used by the arc-length metric.
    fn load_norm_sq(&self) -> f64;
}

/// A nonlinear problem with dimension-checked evaluation.
///
/// `step_work` is an optional synthetic cost charged once per arc-length
/// step. It stands in for the assembly and solve time of a large model so
/// that scheduling behaviour can be measured on toy problems.
#[derive(Clone, Debug)]
pub struct ProblemDef {
    name: String,
    model: Arc<dyn Model>,
    step_work: Duration,
}

impl ProblemDef {
    pub fn new(name: impl Into<String>, model: Arc<dyn Model>) -> Self {
        Self {
            name: name.into(),
            model,
            step_work: Duration::ZERO,
        }
    }

    pub fn with_step_work(mut self, work: Duration) -> Self {
        self.step_work = work;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_dof(&self) -> usize {
        self.model.n_dof()
    }

    pub fn load_norm_sq(&self) -> f64 {
        self.model.load_norm_sq()
    }

    pub fn step_work(&self) -> Duration {
        self.step_work
    }

    /// Trivial starting point `(u, λ) = (0, 0)`.
    pub fn start_point(&self) -> SolutionPoint {
        SolutionPoint::origin(self.n_dof())
    }

    fn check(&self, w: &SolutionPoint) -> Result<(), ProblemError> {
        if w.n_dof() != self.n_dof() {
            return Err(ProblemError::Dimension {
                expected: self.n_dof(),
                actual: w.n_dof(),
            });
        }
        Ok(())
    }

    pub fn residual(&self, w: &SolutionPoint) -> Result<DVector<f64>, ProblemError> {
        self.check(w)?;
        Ok(self.model.residual(&w.u, w.lambda))
    }

    pub fn jacobian_u(&self, w: &SolutionPoint) -> Result<DMatrix<f64>, ProblemError> {
        self.check(w)?;
        Ok(self.model.jacobian_u(&w.u, w.lambda))
    }

    pub fn jacobian_lambda(&self, w: &SolutionPoint) -> Result<DVector<f64>, ProblemError> {
        self.check(w)?;
        Ok(self.model.jacobian_lambda(&w.u, w.lambda))
    }

    pub fn residual_norm(&self, w: &SolutionPoint) -> Result<f64, ProblemError> {
        Ok(self.residual(w)?.norm())
    }
}

/// `G = k·u − λ·P`.
#[derive(Debug, Clone, Copy)]
pub struct Linear1d {
    pub stiffness: f64,
    pub load: f64,
}

impl Model for Linear1d {
    fn n_dof(&self) -> usize {
        1
    }
    fn residual(&self, u: &DVector<f64>, lambda: f64) -> DVector<f64> {
        DVector::from_element(1, self.stiffness * u[0] - lambda * self.load)
    }
    fn jacobian_u(&self, _u: &DVector<f64>, _lambda: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.stiffness)
    }
    fn jacobian_lambda(&self, _u: &DVector<f64>, _lambda: f64) -> DVector<f64> {
        DVector::from_element(1, -self.load)
    }
    fn load_norm_sq(&self) -> f64 {
        self.load * self.load
    }
}

/// `G = u³ − 3u − λ`; limit points at `(−1, 2)` and `(1, −2)`.
#[derive(Debug, Clone, Copy)]
pub struct Cubic1d;

impl Model for Cubic1d {
    fn n_dof(&self) -> usize {
        1
    }
    fn residual(&self, u: &DVector<f64>, lambda: f64) -> DVector<f64> {
        let x = u[0];
        DVector::from_element(1, x * x * x - 3.0 * x - lambda)
    }
    fn jacobian_u(&self, u: &DVector<f64>, _lambda: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 3.0 * u[0] * u[0] - 3.0)
    }
    fn jacobian_lambda(&self, _u: &DVector<f64>, _lambda: f64) -> DVector<f64> {
        DVector::from_element(1, -1.0)
    }
    fn load_norm_sq(&self) -> f64 {
        1.0
    }
}

/// `G = u³ − (λ − 1)·u`; primary branch `u = 0`, secondary branch
/// `u² = λ − 1`, bifurcation at `(0, 1)`. Not of proportional-loading form,
/// so `PᵀP` is fixed to 1.
#[derive(Debug, Clone, Copy)]
pub struct Pitchfork;

impl Model for Pitchfork {
    fn n_dof(&self) -> usize {
        1
    }
    fn residual(&self, u: &DVector<f64>, lambda: f64) -> DVector<f64> {
        let x = u[0];
        DVector::from_element(1, x * x * x - (lambda - 1.0) * x)
    }
    fn jacobian_u(&self, u: &DVector<f64>, lambda: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 3.0 * u[0] * u[0] - (lambda - 1.0))
    }
    fn jacobian_lambda(&self, u: &DVector<f64>, _lambda: f64) -> DVector<f64> {
        DVector::from_element(1, -u[0])
    }
    fn load_norm_sq(&self) -> f64 {
        1.0
    }
}

/// Chain of cubic springs with nearest-neighbour coupling:
/// `G_i = u_i³ − 3u_i + c(2u_i − u_{i−1} − u_{i+1}) − λP_i`, with
/// `u_0 = u_{n+1} = 0` implied at the ends.
#[derive(Debug, Clone)]
pub struct SpringChain {
    pub coupling: f64,
    pub load: DVector<f64>,
}

impl SpringChain {
    pub fn uniform(n: usize, coupling: f64, load: f64) -> Self {
        Self {
            coupling,
            load: DVector::from_element(n, load),
        }
    }
}

impl Model for SpringChain {
    fn n_dof(&self) -> usize {
        self.load.len()
    }

    fn residual(&self, u: &DVector<f64>, lambda: f64) -> DVector<f64> {
        let n = self.n_dof();
        DVector::from_fn(n, |i, _| {
            let left = if i > 0 { u[i - 1] } else { 0.0 };
            let right = if i + 1 < n { u[i + 1] } else { 0.0 };
            let x = u[i];
            x * x * x - 3.0 * x + self.coupling * (2.0 * x - left - right) - lambda * self.load[i]
        })
    }

    fn jacobian_u(&self, u: &DVector<f64>, _lambda: f64) -> DMatrix<f64> {
        let n = self.n_dof();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            k[(i, i)] = 3.0 * u[i] * u[i] - 3.0 + 2.0 * self.coupling;
            if i > 0 {
                k[(i, i - 1)] = -self.coupling;
            }
            if i + 1 < n {
                k[(i, i + 1)] = -self.coupling;
            }
        }
        k
    }

    fn jacobian_lambda(&self, _u: &DVector<f64>, _lambda: f64) -> DVector<f64> {
        -&self.load
    }

    fn load_norm_sq(&self) -> f64 {
        self.load.norm_squared()
    }
}

/// Serializable selection of a built-in problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase", deny_unknown_fields)]
pub enum BuiltinSpec {
    Linear1d {
        #[serde(default = "one")]
        stiffness: f64,
        #[serde(default = "one")]
        load: f64,
    },
    Cubic1d,
    Pitchfork,
    Springchain {
        n: usize,
        #[serde(default = "default_coupling")]
        coupling: f64,
        #[serde(default = "one")]
        load: f64,
    },
}

fn one() -> f64 {
    1.0
}

fn default_coupling() -> f64 {
    0.5
}

impl BuiltinSpec {
    pub fn name(&self) -> &'static str {
        match self {
            BuiltinSpec::Linear1d { .. } => "linear1d",
            BuiltinSpec::Cubic1d => "cubic1d",
            BuiltinSpec::Pitchfork => "pitchfork",
            BuiltinSpec::Springchain { .. } => "springchain",
        }
    }

    pub fn build(&self) -> Result<ProblemDef, ProblemError> {
        let invalid = |name: &str, reason: &str| ProblemError::InvalidParameter {
            problem: self.name().to_string(),
            name: name.to_string(),
            reason: reason.to_string(),
        };
        let model: Arc<dyn Model> = match *self {
            BuiltinSpec::Linear1d { stiffness, load } => {
                if !stiffness.is_finite() || stiffness == 0.0 {
                    return Err(invalid("stiffness", "must be finite and nonzero"));
                }
                if !load.is_finite() || load == 0.0 {
                    return Err(invalid("load", "must be finite and nonzero"));
                }
                Arc::new(Linear1d { stiffness, load })
            }
            BuiltinSpec::Cubic1d => Arc::new(Cubic1d),
            BuiltinSpec::Pitchfork => Arc::new(Pitchfork),
            BuiltinSpec::Springchain { n, coupling, load } => {
                if n == 0 {
                    return Err(invalid("n", "must be at least 1"));
                }
                if !coupling.is_finite() {
                    return Err(invalid("coupling", "must be finite"));
                }
                if !load.is_finite() || load == 0.0 {
                    return Err(invalid("load", "must be finite and nonzero"));
                }
                Arc::new(SpringChain::uniform(n, coupling, load))
            }
        };
        Ok(ProblemDef::new(self.name(), model))
    }
}

/// Builds a named builtin from loose numeric parameters. Missing parameters
/// take their defaults; parameters the builtin does not know are rejected.
pub fn make_builtin(name: &str, params: &BTreeMap<String, f64>) -> Result<ProblemDef, ProblemError> {
    let allowed: &[&str] = match name {
        "linear1d" => &["stiffness", "load"],
        "cubic1d" | "pitchfork" => &[],
        "springchain" => &["n", "coupling", "load"],
        other => return Err(ProblemError::UnknownBuiltin(other.to_string())),
    };
    if let Some(key) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(ProblemError::InvalidParameter {
            problem: name.to_string(),
            name: key.clone(),
            reason: "unknown parameter".to_string(),
        });
    }
    let get = |key: &str, default: f64| params.get(key).copied().unwrap_or(default);
    let spec = match name {
        "linear1d" => BuiltinSpec::Linear1d {
            stiffness: get("stiffness", 1.0),
            load: get("load", 1.0),
        },
        "cubic1d" => BuiltinSpec::Cubic1d,
        "pitchfork" => BuiltinSpec::Pitchfork,
        _ => {
            let n = params.get("n").copied().ok_or_else(|| ProblemError::InvalidParameter {
                problem: name.to_string(),
                name: "n".to_string(),
                reason: "required".to_string(),
            })?;
            if n < 1.0 || n.fract() != 0.0 {
                return Err(ProblemError::InvalidParameter {
                    problem: name.to_string(),
                    name: "n".to_string(),
                    reason: "must be a positive integer".to_string(),
                });
            }
            BuiltinSpec::Springchain {
                n: n as usize,
                coupling: get("coupling", default_coupling()),
                load: get("load", 1.0),
            }
        }
    };
    spec.build()
}
