//! The non-minimal-order model: constraint inertia `M̄`, nonlinear matrix `C̄`,
//! and the virtual-mass conditioning analysis.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::projection::{symmetrize, ProjectorBundle};
use crate::{Error, Result};

/// Unconstrained plant quantities evaluated at one state.
#[derive(Debug, Clone)]
pub struct PlantMatrices {
    /// Inertia matrix `M(q)`, symmetric positive definite.
    pub mass: DMatrix<f64>,
    /// Coriolis/centrifugal matrix `C(q, q̇)`.
    pub coriolis: DMatrix<f64>,
    /// Conservative generalized forces `f_g(q)`.
    pub gravity: DVector<f64>,
    /// Input map `B(q)` (n×k).
    pub input_map: DMatrix<f64>,
}

impl PlantMatrices {
    pub fn dof(&self) -> usize {
        self.mass.nrows()
    }

    /// `h(q, q̇) = f_g − C q̇`, all nonlinear terms of the unconstrained plant.
    pub fn nonlinear_terms(&self, qdot: &DVector<f64>) -> DVector<f64> {
        &self.gravity - &self.coriolis * qdot
    }

    pub(crate) fn check_dims(&self, proj: &ProjectorBundle) -> Result<()> {
        let n = self.dof();
        let ok = self.mass.shape() == (n, n)
            && self.coriolis.shape() == (n, n)
            && self.gravity.len() == n
            && self.input_map.nrows() == n
            && proj.dof() == n;
        if ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!(
                "plant M {:?}, C {:?}, f_g {}, B {:?} vs projector dimension {}",
                self.mass.shape(),
                self.coriolis.shape(),
                self.gravity.len(),
                self.input_map.shape(),
                proj.dof()
            )))
        }
    }
}

/// `M̄ = PMP + μQ`, `C̄ = PCP + PM(ΛP + PΛᵀ) − μΛP` and the spectrum of `M̄`.
#[derive(Debug, Clone)]
pub struct ConstrainedModel {
    pub mbar: DMatrix<f64>,
    pub cbar: DMatrix<f64>,
    pub mu: f64,
    /// Eigenvalues of `M̄`, ascending.
    pub spectrum: Vec<f64>,
    pub cond: f64,
}

impl ConstrainedModel {
    /// `M̄⁻¹ v` by Cholesky; `M̄` is positive definite for any `μ > 0`.
    pub fn solve(&self, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let chol = self.mbar.clone().cholesky().ok_or_else(|| {
            Error::RankDeficient {
                condition: "M̄ is not numerically positive definite".into(),
                required: self.mbar.nrows(),
                found: self.spectrum.iter().filter(|&&l| l > 0.0).count(),
            }
        })?;
        Ok(chol.solve(v))
    }

    pub fn inverse(&self) -> Result<DMatrix<f64>> {
        let n = self.mbar.nrows();
        self.solve(&DMatrix::identity(n, n))
    }
}

fn check_mu(mu: f64) -> Result<()> {
    if mu.is_finite() && mu > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "virtual mass must be positive and finite, got {mu}"
        )))
    }
}

fn sorted_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut eigs: Vec<f64> = SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .collect();
    eigs.sort_by(f64::total_cmp);
    eigs
}

fn mbar_of(plant: &PlantMatrices, proj: &ProjectorBundle, mu: f64) -> DMatrix<f64> {
    symmetrize(&(&proj.p * &plant.mass * &proj.p + &proj.q * mu))
}

/// Assembles the constrained model at one state.
pub fn assemble(
    plant: &PlantMatrices,
    proj: &ProjectorBundle,
    mu: f64,
) -> Result<ConstrainedModel> {
    check_mu(mu)?;
    plant.check_dims(proj)?;

    let p = &proj.p;
    let mbar = mbar_of(plant, proj, mu);
    let cbar = p * &plant.coriolis * p + p * &plant.mass * &proj.p_dot - (&proj.lambda * p) * mu;

    let spectrum = sorted_eigenvalues(&mbar);
    let cond = spectrum[spectrum.len() - 1] / spectrum[0];
    Ok(ConstrainedModel {
        mbar,
        cbar,
        mu,
        spectrum,
        cond,
    })
}

/// Eigenvalues of `M̄` (ascending) and its condition number.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    pub cond: f64,
}

pub fn spectrum_of_mbar(plant: &PlantMatrices, proj: &ProjectorBundle, mu: f64) -> Result<Spectrum> {
    check_mu(mu)?;
    plant.check_dims(proj)?;
    let eigenvalues = sorted_eigenvalues(&mbar_of(plant, proj, mu));
    let cond = eigenvalues[eigenvalues.len() - 1] / eigenvalues[0];
    Ok(Spectrum { eigenvalues, cond })
}

/// Nonzero eigenvalues of `PMP` (ascending): the largest `n − r` of them, since
/// `PMP` restricted to `𝒩(A)` is positive definite. Eigenvalues at or below
/// `rank_tol · λ_max(M)` are dropped as round-off.
pub fn projected_inertia_eigenvalues(
    plant: &PlantMatrices,
    proj: &ProjectorBundle,
    rank_tol: f64,
) -> Vec<f64> {
    let pmp = &proj.p * &plant.mass * &proj.p;
    let eigs = sorted_eigenvalues(&pmp);
    let m_max = sorted_eigenvalues(&plant.mass).last().copied().unwrap_or(0.0);
    let skip = eigs.len() - proj.freedom().min(eigs.len());
    eigs.into_iter().skip(skip).filter(|&l| l > rank_tol * m_max).collect()
}

/// `cond(M̄) = max(μ, λ_max) / min(μ, λ_min≠0)` in closed form.
pub fn cond_closed_form(mu: f64, lambda_min: f64, lambda_max: f64) -> f64 {
    mu.max(lambda_max) / mu.min(lambda_min)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "policy", content = "value")]
pub enum MuPolicy {
    Fixed(f64),
    GeometricMean,
    Midpoint,
}

impl Default for MuPolicy {
    fn default() -> Self {
        MuPolicy::GeometricMean
    }
}

impl std::str::FromStr for MuPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "auto" | "geometric-mean" | "geometric" => Ok(MuPolicy::GeometricMean),
            "midpoint" => Ok(MuPolicy::Midpoint),
            other => {
                let v: f64 = other.parse().map_err(|_| {
                    Error::InvalidParameter(format!(
                        "mu must be a positive number, 'auto' or 'midpoint', got {other:?}"
                    ))
                })?;
                check_mu(v)?;
                Ok(MuPolicy::Fixed(v))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MuSelection {
    pub mu: f64,
    /// `[λ_min≠0(PMP), λ_max(PMP)]`; `None` when `P = 0`.
    pub interval: Option<(f64, f64)>,
    pub warning: Option<String>,
}

/// Picks the virtual mass. Automatic policies land inside `[λ_min≠0(PMP), λ_max(PMP)]`,
/// where `cond(M̄)` reaches its minimum `λ_max / λ_min≠0`.
pub fn optimal_mu(
    plant: &PlantMatrices,
    proj: &ProjectorBundle,
    policy: MuPolicy,
    rank_tol: f64,
) -> Result<MuSelection> {
    plant.check_dims(proj)?;
    let nonzero = projected_inertia_eigenvalues(plant, proj, rank_tol);
    let interval = match (nonzero.first(), nonzero.last()) {
        (Some(&lo), Some(&hi)) => Some((lo, hi)),
        _ => None,
    };

    let Some((lo, hi)) = interval else {
        // Fully constrained: M̄ = μI and every μ gives cond = 1.
        let mu = match policy {
            MuPolicy::Fixed(v) => {
                check_mu(v)?;
                v
            }
            _ => plant.mass.trace() / plant.dof() as f64,
        };
        return Ok(MuSelection {
            mu,
            interval: None,
            warning: Some("P = 0: no admissible motion, virtual mass is arbitrary".into()),
        });
    };

    let mu = match policy {
        MuPolicy::Fixed(v) => {
            check_mu(v)?;
            v
        }
        MuPolicy::GeometricMean => (lo * hi).sqrt().clamp(lo, hi),
        MuPolicy::Midpoint => 0.5 * (lo + hi),
    };
    Ok(MuSelection {
        mu,
        interval: Some((lo, hi)),
        warning: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KineticEnergy {
    /// `½ q̇ᵀ M̄ q̇`.
    pub value: f64,
    /// `½ q̇ᵀ M q̇`.
    pub plant_value: f64,
    /// `‖Q q̇‖`.
    pub inadmissible_speed: f64,
    /// True when `q̇` lies in `𝒩(A)` within tolerance; only then do the two forms agree.
    pub admissible: bool,
}

pub fn kinetic_energy(
    plant: &PlantMatrices,
    proj: &ProjectorBundle,
    mu: f64,
    qdot: &DVector<f64>,
) -> Result<KineticEnergy> {
    check_mu(mu)?;
    plant.check_dims(proj)?;
    let mbar = mbar_of(plant, proj, mu);
    let value = 0.5 * qdot.dot(&(&mbar * qdot));
    let plant_value = 0.5 * qdot.dot(&(&plant.mass * qdot));
    let inadmissible_speed = (&proj.q * qdot).norm();
    Ok(KineticEnergy {
        value,
        plant_value,
        inadmissible_speed,
        admissible: inadmissible_speed <= 1e-9 * (1.0 + qdot.norm()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
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

    /// 3-dof instance with PMP eigenvalues {1, 4} on 𝒩 = span(e1, e2) and r = 1.
    fn diagonal_instance() -> (PlantMatrices, ProjectorBundle) {
        let plant = PlantMatrices {
            mass: DMatrix::from_diagonal(&dvector![1.0, 4.0, 7.0]),
            coriolis: DMatrix::zeros(3, 3),
            gravity: DVector::zeros(3),
            input_map: DMatrix::identity(3, 3),
        };
        let jac = ConstraintJacobian::stationary(dmatrix![0.0, 0.0, 3.0]).unwrap();
        (plant, build_projectors(&jac, 1e-10).unwrap())
    }

    #[test]
    fn pendulum_mbar() {
        let (plant, proj) = pendulum_bottom(0.0);
        let m1 = assemble(&plant, &proj, 1.0).unwrap();
        assert_relative_eq!(m1.mbar, DMatrix::identity(2, 2), epsilon = 1e-14);
        let m5 = assemble(&plant, &proj, 5.0).unwrap();
        assert_relative_eq!(m5.mbar, dmatrix![1.0, 0.0; 0.0, 5.0], epsilon = 1e-14);
        assert_relative_eq!(m5.cond, 5.0, epsilon = 1e-12);
        // M̄Q = μQ
        assert_relative_eq!(&m5.mbar * &proj.q, &proj.q * 5.0, epsilon = 1e-14);
    }

    #[test]
    fn unconstrained_model_is_plant() {
        let plant = PlantMatrices {
            mass: dmatrix![2.0, 0.5; 0.5, 1.0],
            coriolis: dmatrix![0.1, -0.3; 0.3, 0.0],
            gravity: dvector![0.0, -1.0],
            input_map: DMatrix::identity(2, 2),
        };
        let proj = ProjectorBundle::unconstrained(2);
        let model = assemble(&plant, &proj, 3.0).unwrap();
        assert_eq!(model.mbar, plant.mass);
        assert_eq!(model.cbar, plant.coriolis);
    }

    #[test]
    fn nonpositive_mu_rejected() {
        let (plant, proj) = pendulum_bottom(0.0);
        assert!(matches!(assemble(&plant, &proj, 0.0), Err(Error::InvalidParameter(_))));
        assert!(matches!(assemble(&plant, &proj, -1.0), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn spectrum_examples() {
        let (plant, proj) = pendulum_bottom(0.0);
        let s = spectrum_of_mbar(&plant, &proj, 2.0).unwrap();
        assert_relative_eq!(s.eigenvalues.as_slice(), [1.0, 2.0].as_slice(), epsilon = 1e-12);
        assert_relative_eq!(s.cond, 2.0, epsilon = 1e-12);

        let (plant, proj) = diagonal_instance();
        let s = spectrum_of_mbar(&plant, &proj, 2.0).unwrap();
        assert_relative_eq!(s.eigenvalues.as_slice(), [1.0, 2.0, 4.0].as_slice(), epsilon = 1e-12);
        assert_relative_eq!(s.cond, 4.0, epsilon = 1e-12);

        let (plant, proj) = pendulum_bottom(0.0);
        let s = spectrum_of_mbar(&plant, &proj, 1.0).unwrap();
        assert_relative_eq!(s.cond, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn optimal_mu_examples() {
        let (plant, proj) = diagonal_instance();
        let sel = optimal_mu(&plant, &proj, MuPolicy::GeometricMean, 1e-10).unwrap();
        assert_relative_eq!(sel.mu, 2.0, epsilon = 1e-12);
        assert_eq!(sel.interval.map(|(a, b)| (a.round(), b.round())), Some((1.0, 4.0)));
        let cond = spectrum_of_mbar(&plant, &proj, sel.mu).unwrap().cond;
        assert_relative_eq!(cond, 4.0, epsilon = 1e-12);

        // grid sweep: minimum 4 attained on [1, 4] only
        for k in -30..=30 {
            let mu = 10f64.powf(k as f64 / 10.0);
            let c = spectrum_of_mbar(&plant, &proj, mu).unwrap().cond;
            assert!(c >= 4.0 - 1e-9);
            if (1.0..=4.0).contains(&mu) {
                assert_relative_eq!(c, 4.0, max_relative = 1e-9);
            } else {
                assert!(c > 4.0);
            }
        }

        let mid = optimal_mu(&plant, &proj, MuPolicy::Midpoint, 1e-10).unwrap();
        assert_relative_eq!(mid.mu, 2.5, epsilon = 1e-12);

        // outside the interval
        let c = spectrum_of_mbar(&plant, &proj, 40.0).unwrap().cond;
        assert_relative_eq!(c, 40.0, max_relative = 1e-12);
        assert_relative_eq!(cond_closed_form(40.0, 1.0, 4.0), 40.0);
    }

    #[test]
    fn optimal_mu_single_eigenvalue() {
        let (plant, proj) = pendulum_bottom(0.0);
        let sel = optimal_mu(&plant, &proj, MuPolicy::GeometricMean, 1e-10).unwrap();
        assert_relative_eq!(sel.mu, 1.0, epsilon = 1e-12);
        let cond = spectrum_of_mbar(&plant, &proj, sel.mu).unwrap().cond;
        assert_relative_eq!(cond, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn optimal_mu_fully_constrained() {
        let plant = PlantMatrices {
            mass: DMatrix::from_diagonal(&dvector![2.0, 4.0]),
            coriolis: DMatrix::zeros(2, 2),
            gravity: DVector::zeros(2),
            input_map: DMatrix::identity(2, 2),
        };
        let proj = build_projectors(&ConstraintJacobian::stationary(DMatrix::identity(2, 2)).unwrap(), 1e-10)
            .unwrap();
        let sel = optimal_mu(&plant, &proj, MuPolicy::GeometricMean, 1e-10).unwrap();
        assert_eq!(sel.mu, 3.0);
        assert!(sel.interval.is_none());
        assert!(sel.warning.is_some());
    }

    #[test]
    fn mu_policy_parsing() {
        assert_eq!("auto".parse::<MuPolicy>().unwrap(), MuPolicy::GeometricMean);
        assert_eq!("midpoint".parse::<MuPolicy>().unwrap(), MuPolicy::Midpoint);
        assert_eq!("0.1".parse::<MuPolicy>().unwrap(), MuPolicy::Fixed(0.1));
        assert!("-1".parse::<MuPolicy>().is_err());
        assert!("abc".parse::<MuPolicy>().is_err());
    }

    #[test]
    fn kinetic_energy_independent_of_mu() {
        let w = 1.7;
        let (plant, proj) = pendulum_bottom(w);
        for mu in [0.1, 1.0, 10.0] {
            let t = kinetic_energy(&plant, &proj, mu, &dvector![w, 0.0]).unwrap();
            assert!(t.admissible);
            assert_relative_eq!(t.value, w * w / 2.0, epsilon = 1e-14);
            assert_relative_eq!(t.plant_value, t.value, epsilon = 1e-14);
        }
        let zero = kinetic_energy(&plant, &proj, 1.0, &dvector![0.0, 0.0]).unwrap();
        assert_eq!(zero.value, 0.0);
    }

    #[test]
    fn kinetic_energy_flags_inadmissible_velocity() {
        let (plant, proj) = pendulum_bottom(0.0);
        let mu = 10.0;
        let qdot = dvector![1.0, 0.5];
        let t = kinetic_energy(&plant, &proj, mu, &qdot).unwrap();
        assert!(!t.admissible);
        assert_relative_eq!(t.inadmissible_speed, 0.5);
        // M = I, so the cross terms vanish and the gap is ½μ‖Qq̇‖² − ½‖Qq̇‖².
        assert_relative_eq!(t.value - t.plant_value, 0.5 * (mu - 1.0) * 0.25, epsilon = 1e-14);
    }
}
