//! Benchmark systems in Cartesian (dependent) coordinates.
//!
//! Defaults: unit masses, unit lengths, `g = 9.81`.
//!
//! | name                 | n | m | notes                                          |
//! |----------------------|---|---|------------------------------------------------|
//! | `pendulum`           | 2 | 1 | point mass on a rod                            |
//! | `double-pendulum`    | 4 | 2 | two point masses in a chain                    |
//! | `slider-crank`       | 4 | 3 | crank = rod length; rank(A) drops at (0,1,0,0) |
//! | `switching-particle` | 2 | 1 | free particle captured by the floor at t = 1   |
//! | `redundant-pendulum` | 2 | 2 | pendulum with its constraint row duplicated    |

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use rand::Rng;

use crate::projection::build_projectors;
use crate::sim::TopologyEvent;
use crate::system::{jacobian_at, ConstraintSet, MechanicalSystem};
use crate::{Error, Result, DEFAULT_RANK_TOL};

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone)]
pub struct Pendulum {
    pub mass: f64,
    pub length: f64,
    pub g: f64,
}

impl Default for Pendulum {
    fn default() -> Self {
        Self { mass: 1.0, length: 1.0, g: GRAVITY }
    }
}

impl Pendulum {
    /// Configuration at angle `theta` from the downward vertical.
    pub fn at_angle(&self, theta: f64) -> DVector<f64> {
        dvector![self.length * theta.sin(), -self.length * theta.cos()]
    }
}

impl MechanicalSystem for Pendulum {
    fn name(&self) -> &str {
        "pendulum"
    }
    fn dof(&self) -> usize {
        2
    }
    fn num_constraints(&self) -> usize {
        1
    }
    fn num_inputs(&self) -> usize {
        2
    }
    fn mass_matrix(&self, _q: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(2, 2) * self.mass
    }
    fn coriolis(&self, _q: &DVector<f64>, _qdot: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(2, 2)
    }
    fn gravity(&self, _q: &DVector<f64>) -> DVector<f64> {
        dvector![0.0, -self.mass * self.g]
    }
    fn potential_energy(&self, q: &DVector<f64>) -> f64 {
        self.mass * self.g * q[1]
    }
    fn constraint_matrix(&self, q: &DVector<f64>) -> DMatrix<f64> {
        dmatrix![2.0 * q[0], 2.0 * q[1]]
    }
    fn constraint_rate(&self, _q: &DVector<f64>, qdot: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(dmatrix![2.0 * qdot[0], 2.0 * qdot[1]])
    }
    fn input_map(&self, _q: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(2, 2)
    }
    fn constraint_residual(&self, q: &DVector<f64>) -> Option<DVector<f64>> {
        Some(dvector![q[0] * q[0] + q[1] * q[1] - self.length * self.length])
    }
}

/// Pendulum whose single constraint row appears twice, so `rank(A) = 1 < m = 2`.
#[derive(Debug, Clone, Default)]
pub struct RedundantPendulum {
    pub inner: Pendulum,
}

impl MechanicalSystem for RedundantPendulum {
    fn name(&self) -> &str {
        "redundant-pendulum"
    }
    fn dof(&self) -> usize {
        2
    }
    fn num_constraints(&self) -> usize {
        2
    }
    fn num_inputs(&self) -> usize {
        2
    }
    fn mass_matrix(&self, q: &DVector<f64>) -> DMatrix<f64> {
        self.inner.mass_matrix(q)
    }
    fn coriolis(&self, q: &DVector<f64>, qdot: &DVector<f64>) -> DMatrix<f64> {
        self.inner.coriolis(q, qdot)
    }
    fn gravity(&self, q: &DVector<f64>) -> DVector<f64> {
        self.inner.gravity(q)
    }
    fn potential_energy(&self, q: &DVector<f64>) -> f64 {
        self.inner.potential_energy(q)
    }
    fn constraint_matrix(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let row = self.inner.constraint_matrix(q);
        DMatrix::from_fn(2, 2, |_, j| row[(0, j)])
    }
    fn constraint_rate(&self, q: &DVector<f64>, qdot: &DVector<f64>) -> Option<DMatrix<f64>> {
        let row = self.inner.constraint_rate(q, qdot)?;
        Some(DMatrix::from_fn(2, 2, |_, j| row[(0, j)]))
    }
    fn input_map(&self, q: &DVector<f64>) -> DMatrix<f64> {
        self.inner.input_map(q)
    }
    fn constraint_residual(&self, q: &DVector<f64>) -> Option<DVector<f64>> {
        let phi = self.inner.constraint_residual(q)?[0];
        Some(dvector![phi, phi])
    }
}

/// Two point masses: the first on a rod from the origin, the second on a rod from the first.
#[derive(Debug, Clone)]
pub struct DoublePendulum {
    pub masses: [f64; 2],
    pub lengths: [f64; 2],
    pub g: f64,
}

impl Default for DoublePendulum {
    fn default() -> Self {
        Self { masses: [1.0, 1.0], lengths: [1.0, 1.0], g: GRAVITY }
    }
}

impl DoublePendulum {
    pub fn at_angles(&self, theta1: f64, theta2: f64) -> DVector<f64> {
        let [l1, l2] = self.lengths;
        let (x1, y1) = (l1 * theta1.sin(), -l1 * theta1.cos());
        dvector![x1, y1, x1 + l2 * theta2.sin(), y1 - l2 * theta2.cos()]
    }
}

impl MechanicalSystem for DoublePendulum {
    fn name(&self) -> &str {
        "double-pendulum"
    }
    fn dof(&self) -> usize {
        4
    }
    fn num_constraints(&self) -> usize {
        2
    }
    fn num_inputs(&self) -> usize {
        4
    }
    fn mass_matrix(&self, _q: &DVector<f64>) -> DMatrix<f64> {
        let [m1, m2] = self.masses;
        DMatrix::from_diagonal(&dvector![m1, m1, m2, m2])
    }
    fn coriolis(&self, _q: &DVector<f64>, _qdot: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(4, 4)
    }
    fn gravity(&self, _q: &DVector<f64>) -> DVector<f64> {
        let [m1, m2] = self.masses;
        dvector![0.0, -m1 * self.g, 0.0, -m2 * self.g]
    }
    fn potential_energy(&self, q: &DVector<f64>) -> f64 {
        let [m1, m2] = self.masses;
        self.g * (m1 * q[1] + m2 * q[3])
    }
    fn constraint_matrix(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let (dx, dy) = (q[2] - q[0], q[3] - q[1]);
        dmatrix![
            2.0 * q[0], 2.0 * q[1], 0.0, 0.0;
            -2.0 * dx, -2.0 * dy, 2.0 * dx, 2.0 * dy
        ]
    }
    fn constraint_rate(&self, _q: &DVector<f64>, v: &DVector<f64>) -> Option<DMatrix<f64>> {
        let (dvx, dvy) = (v[2] - v[0], v[3] - v[1]);
        Some(dmatrix![
            2.0 * v[0], 2.0 * v[1], 0.0, 0.0;
            -2.0 * dvx, -2.0 * dvy, 2.0 * dvx, 2.0 * dvy
        ])
    }
    fn input_map(&self, _q: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(4, 4)
    }
    fn constraint_residual(&self, q: &DVector<f64>) -> Option<DVector<f64>> {
        let [l1, l2] = self.lengths;
        let (dx, dy) = (q[2] - q[0], q[3] - q[1]);
        Some(dvector![q[0] * q[0] + q[1] * q[1] - l1 * l1, dx * dx + dy * dy - l2 * l2])
    }
}

/// Crank pin `(x₁, y₁)` on a circle about the origin, slider `(x₂, y₂)` on the line `y = 0`,
/// joined by a rod. With equal crank and rod lengths, `A` loses rank at `q = (0, r, 0, 0)`,
/// where the rod folds back onto the crank and the slider sits on the crank pivot.
#[derive(Debug, Clone)]
pub struct SliderCrank {
    pub masses: [f64; 2],
    pub crank: f64,
    pub rod: f64,
    pub g: f64,
}

impl Default for SliderCrank {
    fn default() -> Self {
        Self { masses: [1.0, 1.0], crank: 1.0, rod: 1.0, g: GRAVITY }
    }
}

impl SliderCrank {
    /// Configuration with crank angle `theta`; `far` selects the slider branch `x₂ = x₁ + √(l² − y₁²)`.
    pub fn at_angle(&self, theta: f64, far: bool) -> DVector<f64> {
        let (x1, y1) = (self.crank * theta.cos(), self.crank * theta.sin());
        let reach = (self.rod * self.rod - y1 * y1).max(0.0).sqrt();
        let x2 = if far { x1 + reach } else { x1 - reach };
        dvector![x1, y1, x2, 0.0]
    }

    /// Configuration where `rank(A)` drops from 3 to 2 (requires crank = rod).
    pub fn singular_configuration(&self) -> DVector<f64> {
        dvector![0.0, self.crank, 0.0, 0.0]
    }
}

impl MechanicalSystem for SliderCrank {
    fn name(&self) -> &str {
        "slider-crank"
    }
    fn dof(&self) -> usize {
        4
    }
    fn num_constraints(&self) -> usize {
        3
    }
    fn num_inputs(&self) -> usize {
        4
    }
    fn mass_matrix(&self, _q: &DVector<f64>) -> DMatrix<f64> {
        let [m1, m2] = self.masses;
        DMatrix::from_diagonal(&dvector![m1, m1, m2, m2])
    }
    fn coriolis(&self, _q: &DVector<f64>, _qdot: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(4, 4)
    }
    fn gravity(&self, _q: &DVector<f64>) -> DVector<f64> {
        let [m1, m2] = self.masses;
        dvector![0.0, -m1 * self.g, 0.0, -m2 * self.g]
    }
    fn potential_energy(&self, q: &DVector<f64>) -> f64 {
        let [m1, m2] = self.masses;
        self.g * (m1 * q[1] + m2 * q[3])
    }
    fn constraint_matrix(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let (dx, dy) = (q[2] - q[0], q[3] - q[1]);
        dmatrix![
            2.0 * q[0], 2.0 * q[1], 0.0, 0.0;
            -2.0 * dx, -2.0 * dy, 2.0 * dx, 2.0 * dy;
            0.0, 0.0, 0.0, 1.0
        ]
    }
    fn constraint_rate(&self, _q: &DVector<f64>, v: &DVector<f64>) -> Option<DMatrix<f64>> {
        let (dvx, dvy) = (v[2] - v[0], v[3] - v[1]);
        Some(dmatrix![
            2.0 * v[0], 2.0 * v[1], 0.0, 0.0;
            -2.0 * dvx, -2.0 * dvy, 2.0 * dvx, 2.0 * dvy;
            0.0, 0.0, 0.0, 0.0
        ])
    }
    fn input_map(&self, _q: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(4, 4)
    }
    fn constraint_residual(&self, q: &DVector<f64>) -> Option<DVector<f64>> {
        let (dx, dy) = (q[2] - q[0], q[3] - q[1]);
        Some(dvector![
            q[0] * q[0] + q[1] * q[1] - self.crank * self.crank,
            dx * dx + dy * dy - self.rod * self.rod,
            q[3]
        ])
    }
}

/// Point mass under gravity with one candidate constraint, the floor `y = 0`,
/// which is inactive at `t = 0`.
#[derive(Debug, Clone)]
pub struct SwitchingParticle {
    pub mass: f64,
    pub g: f64,
}

impl Default for SwitchingParticle {
    fn default() -> Self {
        Self { mass: 1.0, g: GRAVITY }
    }
}

impl MechanicalSystem for SwitchingParticle {
    fn name(&self) -> &str {
        "switching-particle"
    }
    fn dof(&self) -> usize {
        2
    }
    fn num_constraints(&self) -> usize {
        1
    }
    fn num_inputs(&self) -> usize {
        2
    }
    fn mass_matrix(&self, _q: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(2, 2) * self.mass
    }
    fn coriolis(&self, _q: &DVector<f64>, _qdot: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(2, 2)
    }
    fn gravity(&self, _q: &DVector<f64>) -> DVector<f64> {
        dvector![0.0, -self.mass * self.g]
    }
    fn potential_energy(&self, q: &DVector<f64>) -> f64 {
        self.mass * self.g * q[1]
    }
    fn constraint_matrix(&self, _q: &DVector<f64>) -> DMatrix<f64> {
        dmatrix![0.0, 1.0]
    }
    fn constraint_rate(&self, _q: &DVector<f64>, _qdot: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(dmatrix![0.0, 0.0])
    }
    fn input_map(&self, _q: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(2, 2)
    }
    fn constraint_residual(&self, q: &DVector<f64>) -> Option<DVector<f64>> {
        Some(dvector![q[1]])
    }
    fn initial_constraints(&self) -> ConstraintSet {
        ConstraintSet::none(1)
    }
}

type ConfigSampler = Box<dyn Fn(&mut dyn rand::RngCore) -> DVector<f64> + Send + Sync>;

/// A catalog system with its default scenario data and a sampler for reachable configurations.
pub struct CatalogEntry {
    pub system: Arc<dyn MechanicalSystem>,
    /// Default initial `(q, q̇)` for simulation.
    pub initial_state: (DVector<f64>, DVector<f64>),
    /// Configuration used by `analyze` when none is given.
    pub reference_configuration: DVector<f64>,
    pub events: Vec<TopologyEvent>,
    /// Constraint-consistent regulation target, if the system has a natural one.
    pub regulation_target: Option<DVector<f64>>,
    sampler: ConfigSampler,
}

impl std::fmt::Debug for CatalogEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CatalogEntry")
            .field("system", &self.system.name())
            .field("initial_state", &self.initial_state)
            .field("events", &self.events)
            .finish()
    }
}

impl CatalogEntry {
    pub fn name(&self) -> &str {
        self.system.name()
    }

    /// Random reachable configuration.
    pub fn sample_configuration<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        (self.sampler)(rng)
    }

    /// Random configuration plus a random admissible velocity `q̇ = P ξ` for the given constraint set.
    pub fn sample_state<R: Rng>(
        &self,
        rng: &mut R,
        active: &ConstraintSet,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let q = self.sample_configuration(rng);
        let v = random_vector(rng, q.len(), 2.0);
        Ok((q.clone(), admissible_velocity(self.system.as_ref(), active, &q, &v)?))
    }
}

/// `P(q) v` for the given constraint set.
pub fn admissible_velocity(
    system: &dyn MechanicalSystem,
    active: &ConstraintSet,
    q: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<DVector<f64>> {
    let zero = DVector::zeros(q.len());
    let proj = build_projectors(&jacobian_at(system, active, q, &zero)?, DEFAULT_RANK_TOL)?;
    Ok(&proj.p * v)
}

pub(crate) fn random_vector<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-scale..scale))
}

fn angle(rng: &mut dyn rand::RngCore) -> f64 {
    rng.random_range(-PI..PI)
}

pub const NAMES: [&str; 5] = [
    "pendulum",
    "double-pendulum",
    "slider-crank",
    "switching-particle",
    "redundant-pendulum",
];

pub fn catalog() -> Vec<CatalogEntry> {
    NAMES.iter().map(|n| entry(n).expect("catalog name")).collect()
}

pub fn entry(name: &str) -> Result<CatalogEntry> {
    let e = match name {
        "pendulum" => {
            let sys = Pendulum::default();
            let s = sys.clone();
            CatalogEntry {
                initial_state: (sys.at_angle(0.5), DVector::zeros(2)),
                reference_configuration: dvector![0.0, -sys.length],
                events: Vec::new(),
                regulation_target: Some(sys.at_angle(-0.4)),
                sampler: Box::new(move |rng| s.at_angle(angle(rng))),
                system: Arc::new(sys),
            }
        }
        "redundant-pendulum" => {
            let sys = RedundantPendulum::default();
            let s = sys.inner.clone();
            CatalogEntry {
                initial_state: (sys.inner.at_angle(0.5), DVector::zeros(2)),
                reference_configuration: dvector![0.0, -sys.inner.length],
                events: Vec::new(),
                regulation_target: Some(sys.inner.at_angle(-0.4)),
                sampler: Box::new(move |rng| s.at_angle(angle(rng))),
                system: Arc::new(sys),
            }
        }
        "double-pendulum" => {
            let sys = DoublePendulum::default();
            let s = sys.clone();
            CatalogEntry {
                initial_state: (sys.at_angles(0.6, 1.1), DVector::zeros(4)),
                reference_configuration: sys.at_angles(0.4, -0.7),
                events: Vec::new(),
                regulation_target: Some(sys.at_angles(0.3, 0.6)),
                sampler: Box::new(move |rng| s.at_angles(angle(rng), angle(rng))),
                system: Arc::new(sys),
            }
        }
        "slider-crank" => {
            let sys = SliderCrank::default();
            let s = sys.clone();
            let initial = sys.at_angle(PI / 3.0, true);
            CatalogEntry {
                initial_state: (initial, DVector::zeros(4)),
                reference_configuration: sys.singular_configuration(),
                events: Vec::new(),
                regulation_target: None,
                sampler: Box::new(move |rng| {
                    let far = rng.random_bool(0.5);
                    s.at_angle(angle(rng), far)
                }),
                system: Arc::new(sys),
            }
        }
        "switching-particle" => {
            let sys = SwitchingParticle::default();
            // Launched so that it reaches the floor y = 0 exactly at t = 1.
            let launch = dvector![1.0, 0.5 * sys.g];
            CatalogEntry {
                initial_state: (DVector::zeros(2), launch),
                reference_configuration: DVector::zeros(2),
                events: vec![TopologyEvent { time: 1.0, activate: vec![0], deactivate: vec![] }],
                regulation_target: None,
                sampler: Box::new(|rng| dvector![rng.random_range(-2.0..2.0), 0.0]),
                system: Arc::new(sys),
            }
        }
        other => return Err(Error::UnknownSystem(other.to_string())),
    };
    Ok(e)
}
