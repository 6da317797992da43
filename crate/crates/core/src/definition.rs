//! Text definitions of user systems and scenarios (TOML).
//!
//! A user system has a constant mass matrix, a constant generalized gravity
//! force and polynomial position constraints
//!
//! ```toml
//! name = "bead-on-parabola"
//! n = 2
//! mass = [[1.0, 0.0], [0.0, 1.0]]
//! gravity = [0.0, -9.81]
//! # input_map = [[1.0], [0.0]]      # n×k, defaults to the identity
//! # initial_active = [true]         # defaults to all constraints
//!
//! [[constraint]]                    # Φ = x² − y
//! terms = [
//!     { coeff = 1.0, powers = [2, 0] },
//!     { coeff = -1.0, powers = [0, 1] },
//! ]
//! ```
//!
//! `A` is the exact gradient of `Φ`, `Ȧ` its exact time derivative, `C = 0`
//! and the potential is `V = −f_gᵀq`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::catalog;
use crate::control::RegulationGains;
use crate::model::MuPolicy;
use crate::sim::{project_to_constraints, Controller, GeneralizedState, Scenario, TopologyEvent};
use crate::system::{ConstraintSet, MechanicalSystem};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    pub coeff: f64,
    pub powers: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolynomialConstraint {
    pub terms: Vec<Term>,
}

impl PolynomialConstraint {
    fn value(&self, q: &DVector<f64>) -> f64 {
        self.terms.iter().map(|t| t.coeff * monomial(&t.powers, q, &[])).sum()
    }

    /// `∂Φ/∂q_j`.
    fn gradient(&self, q: &DVector<f64>, j: usize) -> f64 {
        self.terms.iter().map(|t| t.coeff * monomial(&t.powers, q, &[j])).sum()
    }

    /// `∂²Φ/∂q_j∂q_l`.
    fn hessian(&self, q: &DVector<f64>, j: usize, l: usize) -> f64 {
        self.terms.iter().map(|t| t.coeff * monomial(&t.powers, q, &[j, l])).sum()
    }
}

/// `∂/∂q_{d₁} ∂/∂q_{d₂} … Π q_i^{p_i}`.
fn monomial(powers: &[u32], q: &DVector<f64>, derivs: &[usize]) -> f64 {
    let mut p: Vec<i64> = powers.iter().map(|&x| x as i64).collect();
    let mut factor = 1.0;
    for &d in derivs {
        if p[d] == 0 {
            return 0.0;
        }
        factor *= p[d] as f64;
        p[d] -= 1;
    }
    p.iter().zip(q.iter()).fold(factor, |acc, (&e, &x)| acc * x.powi(e as i32))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSystem {
    name: String,
    n: usize,
    mass: Vec<Vec<f64>>,
    #[serde(default)]
    gravity: Option<Vec<f64>>,
    #[serde(default)]
    input_map: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    initial_active: Option<Vec<bool>>,
    #[serde(default)]
    constraint: Vec<PolynomialConstraint>,
}

/// A system read from a TOML definition.
#[derive(Debug, Clone)]
pub struct UserSystem {
    name: String,
    mass: DMatrix<f64>,
    gravity: DVector<f64>,
    input_map: DMatrix<f64>,
    constraints: Vec<PolynomialConstraint>,
    initial_active: ConstraintSet,
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Parse(format!("{what}: rows have different lengths")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

impl UserSystem {
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: RawSystem = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let n = raw.n;
        if n == 0 {
            return Err(Error::Parse("n must be positive".into()));
        }
        let mass = matrix(&raw.mass, "mass")?;
        if mass.shape() != (n, n) {
            return Err(Error::DimensionMismatch(format!("mass must be {n}×{n}")));
        }
        if (&mass - mass.transpose()).amax() > 0.0 {
            return Err(Error::InvalidInput("mass must be symmetric".into()));
        }
        if mass.clone().cholesky().is_none() {
            return Err(Error::InvalidInput("mass must be positive definite".into()));
        }
        let gravity = DVector::from_vec(raw.gravity.unwrap_or_else(|| vec![0.0; n]));
        if gravity.len() != n {
            return Err(Error::DimensionMismatch(format!("gravity must have {n} entries")));
        }
        let input_map = match raw.input_map {
            Some(rows) => matrix(&rows, "input_map")?,
            None => DMatrix::identity(n, n),
        };
        if input_map.nrows() != n || input_map.ncols() == 0 {
            return Err(Error::DimensionMismatch(format!("input_map must have {n} rows")));
        }
        for (i, c) in raw.constraint.iter().enumerate() {
            if c.terms.iter().any(|t| t.powers.len() != n) {
                return Err(Error::DimensionMismatch(format!("constraint {i}: powers must have {n} entries")));
            }
        }
        let m = raw.constraint.len();
        let initial_active = match raw.initial_active {
            Some(mask) if mask.len() == m => ConstraintSet::from_mask(mask),
            Some(_) => return Err(Error::DimensionMismatch(format!("initial_active must have {m} entries"))),
            None => ConstraintSet::all(m),
        };
        let all_finite = mass.iter().chain(gravity.iter()).chain(input_map.iter()).all(|x| x.is_finite())
            && raw.constraint.iter().flat_map(|c| &c.terms).all(|t| t.coeff.is_finite());
        if !all_finite {
            return Err(Error::InvalidInput("definition contains non-finite numbers".into()));
        }
        Ok(Self {
            name: raw.name,
            mass,
            gravity,
            input_map,
            constraints: raw.constraint,
            initial_active,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

impl MechanicalSystem for UserSystem {
    fn name(&self) -> &str {
        &self.name
    }
    fn dof(&self) -> usize {
        self.mass.nrows()
    }
    fn num_constraints(&self) -> usize {
        self.constraints.len()
    }
    fn num_inputs(&self) -> usize {
        self.input_map.ncols()
    }
    fn mass_matrix(&self, _q: &DVector<f64>) -> DMatrix<f64> {
        self.mass.clone()
    }
    fn coriolis(&self, _q: &DVector<f64>, _qdot: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.dof(), self.dof())
    }
    fn gravity(&self, _q: &DVector<f64>) -> DVector<f64> {
        self.gravity.clone()
    }
    fn potential_energy(&self, q: &DVector<f64>) -> f64 {
        -self.gravity.dot(q)
    }
    fn constraint_matrix(&self, q: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.constraints.len(), self.dof(), |i, j| self.constraints[i].gradient(q, j))
    }
    fn constraint_rate(&self, q: &DVector<f64>, qdot: &DVector<f64>) -> Option<DMatrix<f64>> {
        let n = self.dof();
        Some(DMatrix::from_fn(self.constraints.len(), n, |i, j| {
            (0..n).map(|l| self.constraints[i].hessian(q, j, l) * qdot[l]).sum()
        }))
    }
    fn input_map(&self, _q: &DVector<f64>) -> DMatrix<f64> {
        self.input_map.clone()
    }
    fn constraint_residual(&self, q: &DVector<f64>) -> Option<DVector<f64>> {
        Some(DVector::from_iterator(self.constraints.len(), self.constraints.iter().map(|c| c.value(q))))
    }
    fn initial_constraints(&self) -> ConstraintSet {
        self.initial_active.clone()
    }
}

/// `mu = "auto"` or `mu = 2.5`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum MuSetting {
    Value(f64),
    Policy(String),
}

impl MuSetting {
    pub fn policy(&self) -> Result<MuPolicy> {
        match self {
            MuSetting::Value(v) => Ok(MuPolicy::Fixed(*v)),
            MuSetting::Policy(s) => s.parse(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    #[default]
    None,
    Regulate,
}

impl std::str::FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ControllerKind::None),
            "regulate" => Ok(ControllerKind::Regulate),
            other => Err(Error::InvalidParameter(format!("unknown controller {other:?}"))),
        }
    }
}

/// Isotropic gains `Kp = kp·I`, `Kd = kd·I`.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainSpec {
    pub kp: f64,
    pub kd: f64,
    pub sigma: f64,
}

impl Default for GainSpec {
    fn default() -> Self {
        Self { kp: 10.0, kd: 10.0, sigma: 1.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForceSegment {
    pub time: f64,
    pub value: Vec<f64>,
}

/// Scenario as written in a file; every field may also come from the command line.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    /// Catalog system name.
    pub system: Option<String>,
    /// Path to a user system definition, relative to the scenario file.
    pub system_file: Option<PathBuf>,
    pub horizon: Option<f64>,
    pub dt: Option<f64>,
    pub mu: Option<MuSetting>,
    pub q: Option<Vec<f64>>,
    pub qdot: Option<Vec<f64>>,
    /// Retract `q` onto `Φ = 0` before starting.
    #[serde(default)]
    pub project_initial: bool,
    pub retract_every: Option<usize>,
    pub controller: Option<ControllerKind>,
    pub target: Option<Vec<f64>>,
    pub gains: Option<GainSpec>,
    #[serde(default, rename = "force")]
    pub forces: Vec<ForceSegment>,
    #[serde(rename = "event")]
    pub events: Option<Vec<TopologyEvent>>,
}

pub const DEFAULT_HORIZON: f64 = 10.0;
pub const DEFAULT_DT: f64 = 1e-3;

impl ScenarioSpec {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut spec: ScenarioSpec = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if let Some(p) = spec.system_file.take() {
            spec.system_file = Some(if p.is_absolute() { p } else { base_dir.join(p) });
        }
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Resolves names, defaults and the initial state into a runnable [`Scenario`].
    pub fn build(&self, rank_tol: f64) -> Result<Scenario> {
        let (system, entry): (Arc<dyn MechanicalSystem>, Option<catalog::CatalogEntry>) =
            match (&self.system, &self.system_file) {
                (Some(_), Some(_)) => {
                    return Err(Error::InvalidInput("give either a system name or a system file, not both".into()))
                }
                (Some(name), None) => {
                    let e = catalog::entry(name)?;
                    (e.system.clone(), Some(e))
                }
                (None, Some(path)) => (Arc::new(UserSystem::from_file(path)?), None),
                (None, None) => return Err(Error::InvalidInput("no system given".into())),
            };
        let n = system.dof();
        let vector = |v: &Vec<f64>, what: &str| -> Result<DVector<f64>> {
            if v.len() != n {
                return Err(Error::DimensionMismatch(format!("{what} must have {n} entries, got {}", v.len())));
            }
            Ok(DVector::from_column_slice(v))
        };

        let (default_q, default_qdot) = match &entry {
            Some(e) => e.initial_state.clone(),
            None => (DVector::zeros(n), DVector::zeros(n)),
        };
        let mut q = match &self.q {
            Some(v) => vector(v, "q")?,
            None if entry.is_some() => default_q,
            None => return Err(Error::InvalidInput("user systems need an initial q".into())),
        };
        let qdot = match &self.qdot {
            Some(v) => vector(v, "qdot")?,
            None => default_qdot,
        };
        let initial_constraints = system.initial_constraints();
        if self.project_initial {
            q = project_to_constraints(&q, system.as_ref(), &initial_constraints, 1e-12, rank_tol)?;
        }

        let controller = match self.controller.unwrap_or_default() {
            ControllerKind::None if self.forces.is_empty() => Controller::None,
            ControllerKind::None => Controller::OpenLoop(
                self.forces
                    .iter()
                    .map(|s| Ok((s.time, vector(&s.value, "force")?)))
                    .collect::<Result<_>>()?,
            ),
            ControllerKind::Regulate => {
                if !self.forces.is_empty() {
                    return Err(Error::InvalidInput("open-loop forces cannot be combined with regulation".into()));
                }
                let target = match (&self.target, entry.as_ref().and_then(|e| e.regulation_target.clone())) {
                    (Some(t), _) => vector(t, "target")?,
                    (None, Some(t)) => t,
                    (None, None) => return Err(Error::InvalidTarget("regulation needs a target".into())),
                };
                let g = self.gains.unwrap_or_default();
                Controller::Regulate { gains: RegulationGains::isotropic(n, g.kp, g.kd, g.sigma), target }
            }
        };

        let events = match &self.events {
            Some(ev) => ev.clone(),
            None => entry.as_ref().map(|e| e.events.clone()).unwrap_or_default(),
        };
        let mu_policy = match &self.mu {
            Some(m) => m.policy()?,
            None => MuPolicy::default(),
        };

        let mut scenario = Scenario::new(
            system,
            GeneralizedState::new(0.0, q, qdot),
            self.horizon.unwrap_or(DEFAULT_HORIZON),
            self.dt.unwrap_or(DEFAULT_DT),
        );
        scenario.mu_policy = mu_policy;
        scenario.controller = controller;
        scenario.events = events;
        scenario.initial_constraints = initial_constraints;
        scenario.rank_tol = rank_tol;
        scenario.retract_every = self.retract_every.filter(|&k| k > 0);
        scenario.validate()?;
        Ok(scenario)
    }
}
