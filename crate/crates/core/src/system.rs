//! Mechanical system definitions and per-state evaluation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::model::PlantMatrices;
use crate::projection::ConstraintJacobian;
use crate::Result;

/// Evaluators for a constrained mechanical system in dependent coordinates.
///
/// `constraint_matrix` returns all `m` candidate constraint rows; which of them
/// are enforced is decided by a [`ConstraintSet`], so matrix dimensions never
/// change when constraints switch.
pub trait MechanicalSystem: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &str;
    /// `n`, number of dependent coordinates.
    fn dof(&self) -> usize;
    /// `m`, number of candidate constraint rows.
    fn num_constraints(&self) -> usize;
    /// `k`, number of actuator inputs.
    fn num_inputs(&self) -> usize;

    fn mass_matrix(&self, q: &DVector<f64>) -> DMatrix<f64>;
    fn coriolis(&self, q: &DVector<f64>, qdot: &DVector<f64>) -> DMatrix<f64>;
    fn gravity(&self, q: &DVector<f64>) -> DVector<f64>;
    /// Potential of the conservative forces, `f_g = −∇V`.
    fn potential_energy(&self, q: &DVector<f64>) -> f64;
    fn constraint_matrix(&self, q: &DVector<f64>) -> DMatrix<f64>;
    /// Analytic `Ȧ(q, q̇)`. `None` falls back to central differences.
    fn constraint_rate(&self, _q: &DVector<f64>, _qdot: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
    fn input_map(&self, q: &DVector<f64>) -> DMatrix<f64>;
    /// Position-level residual `Φ(q)`, one entry per constraint row, if available.
    fn constraint_residual(&self, _q: &DVector<f64>) -> Option<DVector<f64>> {
        None
    }
    /// Constraint rows enforced at `t = 0`.
    fn initial_constraints(&self) -> ConstraintSet {
        ConstraintSet::all(self.num_constraints())
    }
}

/// Mask of enforced constraint rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConstraintSet(Vec<bool>);

impl ConstraintSet {
    pub fn all(m: usize) -> Self {
        Self(vec![true; m])
    }

    pub fn none(m: usize) -> Self {
        Self(vec![false; m])
    }

    pub fn from_mask(mask: Vec<bool>) -> Self {
        Self(mask)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.0.get(i).copied().unwrap_or(false)
    }

    pub fn set(&mut self, i: usize, active: bool) {
        if i < self.0.len() {
            self.0[i] = active;
        }
    }

    pub fn active_indices(&self) -> Vec<usize> {
        self.0.iter().enumerate().filter(|(_, a)| **a).map(|(i, _)| i).collect()
    }

    fn mask_rows(&self, m: &mut DMatrix<f64>) {
        for (i, active) in self.0.iter().enumerate() {
            if !active {
                m.row_mut(i).fill(0.0);
            }
        }
    }

    fn mask_entries(&self, v: &mut DVector<f64>) {
        for (i, active) in self.0.iter().enumerate() {
            if !active {
                v[i] = 0.0;
            }
        }
    }
}

/// Central-difference `Ȧ ≈ (A(q + δq̇) − A(q − δq̇)) / 2δ` with `δ = 1e−6·(1 + ‖q‖)`.
pub fn constraint_rate_fd(
    system: &dyn MechanicalSystem,
    q: &DVector<f64>,
    qdot: &DVector<f64>,
) -> DMatrix<f64> {
    let delta = 1e-6 * (1.0 + q.norm());
    let plus = system.constraint_matrix(&(q + qdot * delta));
    let minus = system.constraint_matrix(&(q - qdot * delta));
    (plus - minus) / (2.0 * delta)
}

/// Plant matrices at `(q, q̇)`.
pub fn plant_at(system: &dyn MechanicalSystem, q: &DVector<f64>, qdot: &DVector<f64>) -> PlantMatrices {
    PlantMatrices {
        mass: system.mass_matrix(q),
        coriolis: system.coriolis(q, qdot),
        gravity: system.gravity(q),
        input_map: system.input_map(q),
    }
}

/// `A` and `Ȧ` at `(q, q̇)` with inactive rows zeroed.
pub fn jacobian_at(
    system: &dyn MechanicalSystem,
    active: &ConstraintSet,
    q: &DVector<f64>,
    qdot: &DVector<f64>,
) -> Result<ConstraintJacobian> {
    let mut a = system.constraint_matrix(q);
    let mut a_dot = system
        .constraint_rate(q, qdot)
        .unwrap_or_else(|| constraint_rate_fd(system, q, qdot));
    active.mask_rows(&mut a);
    active.mask_rows(&mut a_dot);
    ConstraintJacobian::new(a, a_dot)
}

/// `Φ(q)` restricted to active rows, if the system provides it.
pub fn residual_at(
    system: &dyn MechanicalSystem,
    active: &ConstraintSet,
    q: &DVector<f64>,
) -> Option<DVector<f64>> {
    system.constraint_residual(q).map(|mut phi| {
        active.mask_entries(&mut phi);
        phi
    })
}

/// Largest violations found by [`self_test`].
#[derive(Debug, Clone, Default, Serialize)]
pub struct SelfTestReport {
    pub system: String,
    pub samples: usize,
    /// `max ‖M − Mᵀ‖`.
    pub mass_asymmetry: f64,
    /// Smallest eigenvalue of `M` seen.
    pub min_mass_eigenvalue: f64,
    /// `max ‖N + Nᵀ‖` with `N = Ṁ − 2C`, `Ṁ` by central differences.
    pub skew_violation: f64,
    /// `max ‖Ȧ − (A(q+hq̇) − A(q−hq̇))/2h‖` at `h = 1e−5`, or 0 when `Ȧ` is not analytic.
    pub rate_residual: f64,
    /// `max ‖A − ∂Φ/∂q‖` by central differences, or 0 without `Φ`.
    pub residual_gradient_error: f64,
}

impl SelfTestReport {
    pub fn passes(&self) -> bool {
        self.mass_asymmetry <= 1e-12
            && self.min_mass_eigenvalue > 0.0
            && self.skew_violation <= 1e-8
            && self.rate_residual <= 1e-6
            && self.residual_gradient_error <= 1e-6
    }
}

/// Checks `M = Mᵀ ≻ 0`, skew-symmetry of `Ṁ − 2C`, and consistency of `Ȧ` and `Φ` with `A`
/// at random states drawn from `sample`.
pub fn self_test<R, F>(system: &dyn MechanicalSystem, samples: usize, rng: &mut R, mut sample: F) -> SelfTestReport
where
    R: Rng,
    F: FnMut(&mut R) -> (DVector<f64>, DVector<f64>),
{
    let h = 1e-5;
    let mut report = SelfTestReport {
        system: system.name().to_string(),
        samples,
        min_mass_eigenvalue: f64::INFINITY,
        ..Default::default()
    };
    for _ in 0..samples {
        let (q, qdot) = sample(rng);
        let m = system.mass_matrix(&q);
        report.mass_asymmetry = report.mass_asymmetry.max((&m - m.transpose()).amax());
        let eig = m.clone().symmetric_eigenvalues().min();
        report.min_mass_eigenvalue = report.min_mass_eigenvalue.min(eig);

        let m_dot = (system.mass_matrix(&(&q + &qdot * h)) - system.mass_matrix(&(&q - &qdot * h))) / (2.0 * h);
        let n = m_dot - system.coriolis(&q, &qdot) * 2.0;
        report.skew_violation = report.skew_violation.max((&n + n.transpose()).amax());

        if let Some(a_dot) = system.constraint_rate(&q, &qdot) {
            let fd = (system.constraint_matrix(&(&q + &qdot * h)) - system.constraint_matrix(&(&q - &qdot * h)))
                / (2.0 * h);
            report.rate_residual = report.rate_residual.max((a_dot - fd).amax());
        }

        if system.constraint_residual(&q).is_some() {
            let a = system.constraint_matrix(&q);
            let mut grad = DMatrix::zeros(a.nrows(), a.ncols());
            for j in 0..q.len() {
                let mut e = DVector::zeros(q.len());
                e[j] = h;
                let plus = system.constraint_residual(&(&q + &e)).unwrap_or_default();
                let minus = system.constraint_residual(&(&q - &e)).unwrap_or_default();
                grad.set_column(j, &((plus - minus) / (2.0 * h)));
            }
            report.residual_gradient_error = report.residual_gradient_error.max((a - grad).amax());
        }
    }
    report
}
