//! Setpoint regulation of dependent coordinates.
//!
//! Control law, with `e = q − q*`:
//!
//! ```text
//! f = −R (f_g + Kp (e + σ‖e‖η) + Kd q̇)
//! u = −Γ (f_g + Kp (e + σ‖e‖η) + Kd q̇)
//! ```
//!
//! `η` is the unit velocity direction, or a fixed unit vector `ξ ∈ 𝒩(A)` when
//! the velocity is inside the deadband.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::forces::actuation_projectors;
use crate::model::{ConstrainedModel, PlantMatrices};
use crate::projection::ProjectorBundle;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct RegulationGains {
    pub kp: DMatrix<f64>,
    pub kd: DMatrix<f64>,
    /// Must exceed 1.
    pub sigma: f64,
    /// Fallback direction; chosen from `P` at the initial state when `None`.
    pub xi: Option<DVector<f64>>,
}

impl RegulationGains {
    pub fn isotropic(n: usize, kp: f64, kd: f64, sigma: f64) -> Self {
        Self {
            kp: DMatrix::identity(n, n) * kp,
            kd: DMatrix::identity(n, n) * kd,
            sigma,
            xi: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, k) in [("Kp", &self.kp), ("Kd", &self.kd)] {
            if !k.is_square() || (k - k.transpose()).amax() > 1e-12 * (1.0 + k.amax()) {
                return Err(Error::InvalidParameter(format!("{name} must be symmetric")));
            }
            if k.clone().cholesky().is_none() {
                return Err(Error::InvalidParameter(format!("{name} must be positive definite")));
            }
        }
        if self.kp.shape() != self.kd.shape() {
            return Err(Error::DimensionMismatch("Kp and Kd differ in size".into()));
        }
        if !(self.sigma > 1.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("σ must exceed 1, got {}", self.sigma)));
        }
        if let Some(xi) = &self.xi {
            if (xi.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidParameter("ξ must be a unit vector".into()));
            }
        }
        Ok(())
    }
}

/// Which branch of `η` is in effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EtaMode {
    Velocity,
    Fallback,
}

#[derive(Debug, Clone)]
pub struct ControlOutput {
    pub f: DVector<f64>,
    pub u: DVector<f64>,
    pub eta: DVector<f64>,
}

/// Normalized first nonzero column of `P`.
pub fn default_xi(proj: &ProjectorBundle) -> Option<DVector<f64>> {
    let n = proj.dof();
    (0..n).find_map(|j| {
        let col = proj.p.column(j).into_owned();
        let norm = col.norm();
        (norm > 1e-8).then(|| col / norm)
    })
}

/// `ξ` re-projected through the current `P` and normalized; falls back to
/// [`default_xi`] when the projection nearly vanishes.
pub fn projected_xi(proj: &ProjectorBundle, xi: Option<&DVector<f64>>) -> DVector<f64> {
    let n = proj.dof();
    if let Some(xi) = xi {
        let px = &proj.p * xi;
        let norm = px.norm();
        if norm > 1e-6 {
            return px / norm;
        }
    }
    default_xi(proj).unwrap_or_else(|| DVector::zeros(n))
}

/// `η` under the given mode. Velocity mode degrades to `ξ` at exactly zero speed.
pub fn eta_for(mode: EtaMode, qdot: &DVector<f64>, proj: &ProjectorBundle, xi: Option<&DVector<f64>>) -> DVector<f64> {
    let speed = qdot.norm();
    match mode {
        EtaMode::Velocity if speed > 0.0 => qdot / speed,
        _ => projected_xi(proj, xi),
    }
}

pub fn mode_for_speed(speed: f64, deadband: f64) -> EtaMode {
    if speed > deadband {
        EtaMode::Velocity
    } else {
        EtaMode::Fallback
    }
}

/// Evaluates the regulation law with `η` chosen by the deadband `eps_v`.
#[allow(clippy::too_many_arguments)]
pub fn control_force(
    q: &DVector<f64>,
    qdot: &DVector<f64>,
    target: &DVector<f64>,
    gains: &RegulationGains,
    plant: &PlantMatrices,
    proj: &ProjectorBundle,
    eps_v: f64,
    rank_tol: f64,
) -> Result<ControlOutput> {
    let mode = mode_for_speed(qdot.norm(), eps_v);
    control_force_with_mode(q, qdot, target, gains, plant, proj, mode, rank_tol)
}

#[allow(clippy::too_many_arguments)]
pub fn control_force_with_mode(
    q: &DVector<f64>,
    qdot: &DVector<f64>,
    target: &DVector<f64>,
    gains: &RegulationGains,
    plant: &PlantMatrices,
    proj: &ProjectorBundle,
    mode: EtaMode,
    rank_tol: f64,
) -> Result<ControlOutput> {
    let n = plant.dof();
    if q.len() != n || qdot.len() != n || target.len() != n || gains.kp.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "controller expects dimension {n}"
        )));
    }
    let (gamma, r) = actuation_projectors(&plant.input_map, proj, rank_tol)?;
    let e = q - target;
    let eta = eta_for(mode, qdot, proj, gains.xi.as_ref());
    let shaped = &e + &eta * (gains.sigma * e.norm());
    let w = &plant.gravity + &gains.kp * shaped + &gains.kd * qdot;
    Ok(ControlOutput {
        f: -(&r * &w),
        u: -(&gamma * &w),
        eta,
    })
}

/// `V = ½ q̇ᵀ M̄ q̇ + ½ eᵀ Kp e`.
pub fn lyapunov_value(
    q: &DVector<f64>,
    qdot: &DVector<f64>,
    target: &DVector<f64>,
    gains: &RegulationGains,
    model: &ConstrainedModel,
) -> f64 {
    let e = q - target;
    0.5 * qdot.dot(&(&model.mbar * qdot)) + 0.5 * e.dot(&(&gains.kp * &e))
}

/// Stateful wrapper that fixes `ξ`, applies the velocity deadband, and holds the
/// `η` branch for one step after it switches.
#[derive(Debug, Clone)]
pub struct Regulator {
    pub gains: RegulationGains,
    pub target: DVector<f64>,
    pub deadband: f64,
    mode: EtaMode,
    pending: Option<EtaMode>,
}

impl Regulator {
    /// `typical_speed` sets the deadband `ε_v = 1e−9·(1 + typical_speed)`.
    pub fn new(
        mut gains: RegulationGains,
        target: DVector<f64>,
        initial_proj: &ProjectorBundle,
        initial_qdot: &DVector<f64>,
        typical_speed: f64,
    ) -> Result<Self> {
        gains.validate()?;
        if gains.xi.is_none() {
            gains.xi = default_xi(initial_proj);
        }
        let deadband = 1e-9 * (1.0 + typical_speed);
        let mode = mode_for_speed(initial_qdot.norm(), deadband);
        Ok(Self { gains, target, deadband, mode, pending: None })
    }

    pub fn mode(&self) -> EtaMode {
        self.mode
    }

    /// Chooses the `η` branch for the coming step from the step-start velocity.
    pub fn begin_step(&mut self, qdot: &DVector<f64>) {
        let wanted = mode_for_speed(qdot.norm(), self.deadband);
        if wanted == self.mode {
            self.pending = None;
        } else if self.pending == Some(wanted) {
            // held for one step already
            self.mode = wanted;
            self.pending = None;
        } else {
            self.pending = Some(wanted);
        }
    }

    pub fn evaluate(
        &self,
        q: &DVector<f64>,
        qdot: &DVector<f64>,
        plant: &PlantMatrices,
        proj: &ProjectorBundle,
        rank_tol: f64,
    ) -> Result<ControlOutput> {
        control_force_with_mode(q, qdot, &self.target, &self.gains, plant, proj, self.mode, rank_tol)
    }

    pub fn lyapunov(&self, q: &DVector<f64>, qdot: &DVector<f64>, model: &ConstrainedModel) -> f64 {
        lyapunov_value(q, qdot, &self.target, &self.gains, model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::assemble;
    use crate::projection::{build_projectors, ConstraintJacobian};
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    fn pendulum_bottom(omega: f64) -> (PlantMatrices, ProjectorBundle) {
        let plant = PlantMatrices {
            mass: DMatrix::identity(2, 2),
            coriolis: DMatrix::zeros(2, 2),
            gravity: dvector![0.0, -9.81],
            input_map: DMatrix::identity(2, 2),
        };
        let jac = ConstraintJacobian::new(dmatrix![0.0, -2.0], dmatrix![2.0 * omega, 0.0]).unwrap();
        (plant, build_projectors(&jac, 1e-10).unwrap())
    }

    #[test]
    fn gains_validation() {
        assert!(RegulationGains::isotropic(2, 10.0, 10.0, 1.5).validate().is_ok());
        assert!(RegulationGains::isotropic(2, 10.0, 10.0, 1.0).validate().is_err());
        assert!(RegulationGains::isotropic(2, -1.0, 10.0, 1.5).validate().is_err());
        let mut g = RegulationGains::isotropic(2, 1.0, 1.0, 2.0);
        g.kp[(0, 1)] = 0.5;
        assert!(g.validate().is_err());
    }

    #[test]
    fn gravity_compensation_at_rest_on_target() {
        let (plant, proj) = pendulum_bottom(0.0);
        let q = dvector![0.0, -1.0];
        let gains = RegulationGains::isotropic(2, 10.0, 10.0, 1.5);
        let out = control_force(&q, &DVector::zeros(2), &q, &gains, &plant, &proj, 1e-9, 1e-10).unwrap();
        let (_, r) = actuation_projectors(&plant.input_map, &proj, 1e-10).unwrap();
        assert_relative_eq!(out.f, -(r * &plant.gravity), epsilon = 1e-14);
    }

    #[test]
    fn moving_on_target_only_damps() {
        let w = 0.8;
        let (plant, proj) = pendulum_bottom(w);
        let q = dvector![0.0, -1.0];
        let qdot = dvector![w, 0.0];
        let gains = RegulationGains::isotropic(2, 10.0, 7.0, 1.5);
        let out = control_force(&q, &qdot, &q, &gains, &plant, &proj, 1e-9, 1e-10).unwrap();
        // R = P here, so f = −P f_g − 7 P q̇ and P f_g = 0 at the bottom
        assert_relative_eq!(out.f, dvector![-7.0 * w, 0.0], epsilon = 1e-14);
        assert_relative_eq!(out.eta, dvector![1.0, 0.0], epsilon = 1e-14);
    }

    #[test]
    fn scalar_hand_evaluation() {
        let plant = PlantMatrices {
            mass: dmatrix![1.0],
            coriolis: dmatrix![0.0],
            gravity: dvector![0.0],
            input_map: dmatrix![1.0],
        };
        let proj = ProjectorBundle::unconstrained(1);
        let gains = RegulationGains::isotropic(1, 1.0, 1.0, 2.0);
        let out = control_force(&dvector![0.5], &dvector![-1.0], &dvector![0.0], &gains, &plant, &proj, 1e-9, 1e-10)
            .unwrap();
        assert_relative_eq!(out.eta[0], -1.0);
        assert_relative_eq!(out.f[0], 1.5, epsilon = 1e-15);
        assert_relative_eq!(out.u[0], 1.5, epsilon = 1e-15);
    }

    #[test]
    fn fallback_direction_inside_deadband() {
        let (plant, proj) = pendulum_bottom(0.0);
        let gains = RegulationGains::isotropic(2, 1.0, 1.0, 1.5);
        let out = control_force(
            &dvector![0.0, -1.0],
            &dvector![1e-12, 0.0],
            &dvector![0.1, -0.99],
            &gains,
            &plant,
            &proj,
            1e-9,
            1e-10,
        )
        .unwrap();
        assert_relative_eq!(out.eta, dvector![1.0, 0.0], epsilon = 1e-14);
        // ξ given off the admissible space is re-projected
        let xi = dvector![1.0, 1.0] / 2f64.sqrt();
        assert_relative_eq!(projected_xi(&proj, Some(&xi)), dvector![1.0, 0.0], epsilon = 1e-14);
    }

    #[test]
    fn inadmissible_actuation_is_an_error() {
        let (mut plant, proj) = pendulum_bottom(0.0);
        plant.input_map = dmatrix![0.0; 1.0];
        let gains = RegulationGains::isotropic(2, 1.0, 1.0, 1.5);
        let q = dvector![0.0, -1.0];
        let err = control_force(&q, &DVector::zeros(2), &q, &gains, &plant, &proj, 1e-9, 1e-10);
        assert!(matches!(err, Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn lyapunov_examples() {
        let w = 1.3;
        let (plant, proj) = pendulum_bottom(w);
        let gains = RegulationGains::isotropic(2, 4.0, 1.0, 1.5);
        let q = dvector![0.0, -1.0];
        for mu in [0.1, 1.0, 10.0] {
            let model = assemble(&plant, &proj, mu).unwrap();
            assert_eq!(lyapunov_value(&q, &DVector::zeros(2), &q, &gains, &model), 0.0);
            assert_relative_eq!(
                lyapunov_value(&q, &dvector![w, 0.0], &q, &gains, &model),
                w * w / 2.0,
                epsilon = 1e-14
            );
            let target = dvector![0.1, -1.0];
            assert_relative_eq!(
                lyapunov_value(&q, &DVector::zeros(2), &target, &gains, &model),
                0.5 * 4.0 * 0.01,
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn invariant_set_admits_only_zero_error() {
        // With σ > 1, ‖Pe‖ ≤ ‖e‖ < σ‖e‖, so Pe + σ‖e‖η = 0 forces e = 0.
        let (_, proj) = pendulum_bottom(0.0);
        let sigma = 1.5;
        for e in [dvector![0.3, 0.1], dvector![-1.0, 2.0], dvector![0.0, 0.5]] {
            let pe = (&proj.p * &e).norm();
            assert!(pe <= e.norm() + 1e-15);
            assert!(pe < sigma * e.norm());
            let eta = projected_xi(&proj, None);
            assert!((&proj.p * &e + &eta * (sigma * e.norm())).norm() > 0.0);
        }
    }

    #[test]
    fn regulator_holds_branch_for_one_step() {
        let (_, proj) = pendulum_bottom(0.0);
        let gains = RegulationGains::isotropic(2, 1.0, 1.0, 1.5);
        let mut reg = Regulator::new(gains, dvector![0.0, -1.0], &proj, &DVector::zeros(2), 0.0).unwrap();
        assert_eq!(reg.mode(), EtaMode::Fallback);
        let moving = dvector![0.1, 0.0];
        reg.begin_step(&moving);
        assert_eq!(reg.mode(), EtaMode::Fallback);
        reg.begin_step(&moving);
        assert_eq!(reg.mode(), EtaMode::Velocity);
        reg.begin_step(&DVector::zeros(2));
        assert_eq!(reg.mode(), EtaMode::Velocity);
        reg.begin_step(&moving);
        assert_eq!(reg.mode(), EtaMode::Velocity);
    }
}
