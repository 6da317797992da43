//! Accelerations, constraint reactions and actuation through oblique projections.
//!
//! Sign convention: `h(q, q̇) = f_g − C q̇` collects every nonlinear force of the
//! unconstrained plant, so the plant equation reads `M q̈ = f + h + f_c`.
//!
//! With `X = M̄⁻¹P` (which equals `PM̄⁻¹` and the pseudo-inverse of `PMP`) and
//! `S = I − M X`, for an admissible velocity `q̇ ∈ 𝒩(A)`:
//!
//! ```text
//! q̈   =  X (f + h) + Sᵀ Ω q̇
//! f_c = −S (f + h − M Ω q̇)
//! ```

use nalgebra::{DMatrix, DVector};

use crate::model::{ConstrainedModel, PlantMatrices};
use crate::projection::{pseudo_inverse_scaled, ProjectorBundle};
use crate::{Error, Result};

/// Split of a generalized force and the reaction it produces.
#[derive(Debug, Clone)]
pub struct ForceDecomposition {
    /// `P f`.
    pub f_par: DVector<f64>,
    /// `Q f`.
    pub f_perp: DVector<f64>,
    pub f_c: DVector<f64>,
    pub u: DVector<f64>,
}

impl ForceDecomposition {
    pub fn new(proj: &ProjectorBundle, f: &DVector<f64>, f_c: DVector<f64>, u: DVector<f64>) -> Self {
        let f_par = &proj.p * f;
        let f_perp = f - &f_par;
        Self { f_par, f_perp, f_c, u }
    }
}

/// `Γ = (PB)⁺`, `R = BΓ` and `S = I − M M̄⁻¹P`.
#[derive(Debug, Clone)]
pub struct ObliqueProjectors {
    pub r: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub s: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Admissibility {
    pub admissible: bool,
    /// Numerical rank of `PB`.
    pub rank_pb: usize,
    /// Rank of `P`, i.e. `n − r`.
    pub rank_p: usize,
}

impl Admissibility {
    fn into_result(self) -> Result<Self> {
        if self.admissible {
            Ok(self)
        } else {
            Err(Error::RankDeficient {
                condition: "actuation does not span the admissible space: range(PB) ≠ 𝒩(A)".into(),
                required: self.rank_p,
                found: self.rank_pb,
            })
        }
    }
}

fn actuation_inverse(
    b: &DMatrix<f64>,
    proj: &ProjectorBundle,
    rank_tol: f64,
) -> Result<(DMatrix<f64>, Admissibility)> {
    if b.nrows() != proj.dof() {
        return Err(Error::DimensionMismatch(format!(
            "B has {} rows, expected {}",
            b.nrows(),
            proj.dof()
        )));
    }
    let pb = &proj.p * b;
    // Rank of PB is judged against the scale of B, so a PB that is pure round-off reads as 0.
    let scale = if b.is_empty() { 0.0 } else { b.clone().singular_values().max() };
    let (gamma, rank_pb) = pseudo_inverse_scaled(&pb, rank_tol, scale)?;
    let rank_p = proj.freedom();
    let adm = Admissibility {
        admissible: rank_pb == rank_p,
        rank_pb,
        rank_p,
    };
    Ok((gamma, adm))
}

/// Tests `range(PB) = 𝒩(A)` by comparing `rank(PB)` with `rank(P) = n − r`.
pub fn check_admissibility(
    b: &DMatrix<f64>,
    proj: &ProjectorBundle,
    rank_tol: f64,
) -> Result<Admissibility> {
    actuation_inverse(b, proj, rank_tol).map(|(_, adm)| adm)
}

/// `M̄⁻¹P`.
pub fn mbar_inv_p(proj: &ProjectorBundle, model: &ConstrainedModel) -> Result<DMatrix<f64>> {
    model.solve(&proj.p)
}

/// `S = I − M M̄⁻¹P`. Needs no admissibility.
pub fn reaction_projector(
    plant: &PlantMatrices,
    proj: &ProjectorBundle,
    model: &ConstrainedModel,
) -> Result<DMatrix<f64>> {
    let n = plant.dof();
    Ok(DMatrix::identity(n, n) - &plant.mass * mbar_inv_p(proj, model)?)
}

/// `Γ` and `R = BΓ`; fails when admissibility does not hold.
pub fn actuation_projectors(
    b: &DMatrix<f64>,
    proj: &ProjectorBundle,
    rank_tol: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (gamma, adm) = actuation_inverse(b, proj, rank_tol)?;
    adm.into_result()?;
    let r = b * &gamma;
    Ok((gamma, r))
}

pub fn build_oblique(
    plant: &PlantMatrices,
    proj: &ProjectorBundle,
    model: &ConstrainedModel,
    rank_tol: f64,
) -> Result<ObliqueProjectors> {
    plant.check_dims(proj)?;
    let (gamma, r) = actuation_projectors(&plant.input_map, proj, rank_tol)?;
    let s = reaction_projector(plant, proj, model)?;
    Ok(ObliqueProjectors { r, gamma, s })
}

fn check_vec(v: &DVector<f64>, n: usize, what: &str) -> Result<()> {
    if v.len() != n {
        return Err(Error::DimensionMismatch(format!("{what} has length {}, expected {n}", v.len())));
    }
    Ok(())
}

/// Generalized acceleration from the `Ω` form, `q̈ = M̄⁻¹P(f + h) + SᵀΩq̇`.
pub fn acceleration(
    plant: &PlantMatrices,
    proj: &ProjectorBundle,
    model: &ConstrainedModel,
    f: &DVector<f64>,
    qdot: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = plant.dof();
    check_vec(f, n, "f")?;
    check_vec(qdot, n, "q̇")?;
    let x = mbar_inv_p(proj, model)?;
    let s = DMatrix::identity(n, n) - &plant.mass * &x;
    let h = plant.nonlinear_terms(qdot);
    Ok(&x * (f + h) + s.transpose() * (&proj.omega * qdot))
}

/// Acceleration by solving `M̄ q̈ = −C̄ q̇ + P(f + f_g)` directly.
///
/// Agrees with [`acceleration`] for admissible velocities; kept as a cross-check.
pub fn acceleration_via_model(
    plant: &PlantMatrices,
    proj: &ProjectorBundle,
    model: &ConstrainedModel,
    f: &DVector<f64>,
    qdot: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = plant.dof();
    check_vec(f, n, "f")?;
    check_vec(qdot, n, "q̇")?;
    let rhs = &proj.p * (f + &plant.gravity) - &model.cbar * qdot;
    let sol = model.solve(&DMatrix::from_column_slice(n, 1, rhs.as_slice()))?;
    Ok(sol.column(0).into_owned())
}

/// Constraint reaction `f_c = −S(f + h − MΩq̇)`, computed without multipliers.
pub fn constraint_force(
    plant: &PlantMatrices,
    proj: &ProjectorBundle,
    model: &ConstrainedModel,
    f: &DVector<f64>,
    qdot: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = plant.dof();
    check_vec(f, n, "f")?;
    check_vec(qdot, n, "q̇")?;
    let s = reaction_projector(plant, proj, model)?;
    let h = plant.nonlinear_terms(qdot);
    Ok(-(s * (f + h - &plant.mass * (&proj.omega * qdot))))
}

/// Minimum-norm actuator vector `u = Γ f‖` and the full generalized force `f = R f‖`.
pub fn resolve_actuation(
    f_par_desired: &DVector<f64>,
    b: &DMatrix<f64>,
    proj: &ProjectorBundle,
    rank_tol: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_vec(f_par_desired, proj.dof(), "f‖")?;
    let (gamma, r) = actuation_projectors(b, proj, rank_tol)?;
    Ok((&gamma * f_par_desired, &r * f_par_desired))
}

/// Orthogonal-complement input `f⊥` that makes the constraint reaction equal `f_c_desired`
/// when `f = f‖ + f⊥` is applied.
///
/// From `f_c = −S(f + h − MΩq̇)` and `S f⊥ = f⊥` for `f⊥ ∈ 𝒩⊥`:
/// `f⊥ = −S(f‖ + h − MΩq̇) − f_c_desired`.
#[allow(clippy::too_many_arguments)]
pub fn force_split_for_control(
    f_par: &DVector<f64>,
    f_c_desired: &DVector<f64>,
    plant: &PlantMatrices,
    proj: &ProjectorBundle,
    model: &ConstrainedModel,
    qdot: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = plant.dof();
    check_vec(f_par, n, "f‖")?;
    check_vec(f_c_desired, n, "f_c")?;
    let leak = (&proj.p * f_c_desired).norm();
    if leak > 1e-9 * (1.0 + f_c_desired.norm()) {
        return Err(Error::InvalidTarget(format!(
            "desired constraint force has a component {leak:e} in 𝒩(A); reactions must lie in 𝒩⊥(A)"
        )));
    }
    let natural = constraint_force(plant, proj, model, &(&proj.p * f_par), qdot)?;
    Ok(natural - f_c_desired)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::assemble;
    use crate::oracle;
    use crate::projection::{build_projectors, ConstraintJacobian};
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    const TOL: f64 = 1e-12;

    /// Unit pendulum (m = g = L = 1) at the bottom, moving with angular rate ω.
    fn pendulum(omega: f64, b: DMatrix<f64>, mu: f64) -> (PlantMatrices, ProjectorBundle, ConstrainedModel) {
        let plant = PlantMatrices {
            mass: DMatrix::identity(2, 2),
            coriolis: DMatrix::zeros(2, 2),
            gravity: dvector![0.0, -1.0],
            input_map: b,
        };
        let jac = ConstraintJacobian::new(dmatrix![0.0, -2.0], dmatrix![2.0 * omega, 0.0]).unwrap();
        let proj = build_projectors(&jac, 1e-10).unwrap();
        let model = assemble(&plant, &proj, mu).unwrap();
        (plant, proj, model)
    }

    #[test]
    fn admissibility_examples() {
        let (_, proj, _) = pendulum(0.0, DMatrix::identity(2, 2), 1.0);
        assert!(check_admissibility(&DMatrix::identity(2, 2), &proj, 1e-10).unwrap().admissible);

        let normal = dmatrix![0.0; 1.0];
        let adm = check_admissibility(&normal, &proj, 1e-10).unwrap();
        assert!(!adm.admissible);
        assert_eq!((adm.rank_pb, adm.rank_p), (0, 1));
        assert!(matches!(
            resolve_actuation(&dvector![1.0, 0.0], &normal, &proj, 1e-10),
            Err(Error::RankDeficient { .. })
        ));

        let tangent = dmatrix![2.0; 0.0];
        assert!(check_admissibility(&tangent, &proj, 1e-10).unwrap().admissible);
        let (gamma, r) = actuation_projectors(&tangent, &proj, 1e-10).unwrap();
        assert_relative_eq!(gamma, oracle::reference_pinv(&tangent, 1e-12), epsilon = TOL);
        assert_relative_eq!(&r, &r.transpose(), epsilon = TOL);
        assert_relative_eq!(&r * &r, r.clone(), epsilon = TOL);
    }

    #[test]
    fn oblique_examples() {
        let (plant, proj, model) = pendulum(0.3, DMatrix::identity(2, 2), 1.0);
        let ob = build_oblique(&plant, &proj, &model, 1e-10).unwrap();
        assert_relative_eq!(ob.r, proj.p, epsilon = TOL);
        assert_relative_eq!(ob.s, dmatrix![0.0, 0.0; 0.0, 1.0], epsilon = TOL);

        let free = PlantMatrices {
            mass: dmatrix![2.0, 0.3; 0.3, 1.0],
            coriolis: DMatrix::zeros(2, 2),
            gravity: DVector::zeros(2),
            input_map: dmatrix![1.0; 2.0],
        };
        let proj = ProjectorBundle::unconstrained(2);
        let model = assemble(&free, &proj, 1.0).unwrap();
        let s = reaction_projector(&free, &proj, &model).unwrap();
        assert!(s.amax() < TOL);
        // B has a single column: R = BB⁺ needs rank(PB) = 2, so it is inadmissible here.
        assert!(build_oblique(&free, &proj, &model, 1e-10).is_err());
        let (_, r) = actuation_projectors(&DMatrix::identity(2, 2), &proj, 1e-10).unwrap();
        assert_relative_eq!(r, DMatrix::identity(2, 2), epsilon = TOL);
    }

    #[test]
    fn pendulum_acceleration_and_tension() {
        for w in [0.0, 0.5, 2.0] {
            for mu in [0.1, 1.0, 10.0] {
                let (plant, proj, model) = pendulum(w, DMatrix::identity(2, 2), mu);
                let qdot = dvector![w, 0.0];
                let f = DVector::zeros(2);
                let qdd = acceleration(&plant, &proj, &model, &f, &qdot).unwrap();
                assert_relative_eq!(qdd, dvector![0.0, w * w], epsilon = TOL);
                let alt = acceleration_via_model(&plant, &proj, &model, &f, &qdot).unwrap();
                assert_relative_eq!(alt, qdd, epsilon = 1e-9);
                let fc = constraint_force(&plant, &proj, &model, &f, &qdot).unwrap();
                assert_relative_eq!(fc, dvector![0.0, 1.0 + w * w], epsilon = TOL);
                // Newton balance M q̈ + C q̇ = f_g + f_c + f
                assert_relative_eq!(&plant.mass * &qdd, &plant.gravity + &fc + &f, epsilon = TOL);
            }
        }
    }

    #[test]
    fn unconstrained_newton() {
        let plant = PlantMatrices {
            mass: dmatrix![2.0, 0.5; 0.5, 1.0],
            coriolis: DMatrix::zeros(2, 2),
            gravity: DVector::zeros(2),
            input_map: DMatrix::identity(2, 2),
        };
        let proj = ProjectorBundle::unconstrained(2);
        let model = assemble(&plant, &proj, 1.0).unwrap();
        let f = dvector![1.0, -2.0];
        let qdd = acceleration(&plant, &proj, &model, &f, &dvector![0.3, 0.1]).unwrap();
        let expected = plant.mass.clone().try_inverse().unwrap() * &f;
        assert_relative_eq!(qdd, expected, epsilon = TOL);
        let fc = constraint_force(&plant, &proj, &model, &f, &dvector![0.3, 0.1]).unwrap();
        assert!(fc.amax() < TOL);
    }

    #[test]
    fn actuation_identity_and_redundant() {
        let (_, proj, _) = pendulum(0.0, DMatrix::identity(2, 2), 1.0);
        let f_par = dvector![0.8, 0.0];
        let (u, f) = resolve_actuation(&f_par, &DMatrix::identity(2, 2), &proj, 1e-10).unwrap();
        assert_relative_eq!(u, f_par, epsilon = TOL);
        assert_relative_eq!(f, f_par, epsilon = TOL);

        // duplicated actuator column b = (1, 1)
        let b = dmatrix![1.0, 1.0; 1.0, 1.0];
        let (u, _) = resolve_actuation(&f_par, &b, &proj, 1e-10).unwrap();
        assert_relative_eq!(u[0], u[1], epsilon = TOL);
        // normal-equations oracle: minimum-norm u = (PB)ᵀ ((PB)(PB)ᵀ)⁺ f‖
        let pb = &proj.p * &b;
        let gram = &pb * pb.transpose();
        let u_ref = pb.transpose() * oracle::reference_pinv(&gram, 1e-12) * &f_par;
        assert_relative_eq!(u, u_ref, epsilon = 1e-12);
        assert_relative_eq!(&proj.p * &b * &u, f_par, epsilon = TOL);
    }

    #[test]
    fn force_split_examples() {
        let (plant, proj, model) = pendulum(0.0, DMatrix::identity(2, 2), 1.0);
        let qdot = DVector::zeros(2);
        let f_par = DVector::zeros(2);
        let natural = constraint_force(&plant, &proj, &model, &f_par, &qdot).unwrap();
        let f_perp = force_split_for_control(&f_par, &natural, &plant, &proj, &model, &qdot).unwrap();
        assert!(f_perp.amax() < TOL);

        let delta = 0.25;
        let target = &natural + dvector![0.0, delta];
        let f_perp = force_split_for_control(&f_par, &target, &plant, &proj, &model, &qdot).unwrap();
        assert_relative_eq!(f_perp, dvector![0.0, -delta], epsilon = TOL);
        let fc = constraint_force(&plant, &proj, &model, &(&f_par + &f_perp), &qdot).unwrap();
        assert_relative_eq!(fc, target, epsilon = TOL);

        let bad = dvector![1.0, 1.0];
        assert!(matches!(
            force_split_for_control(&f_par, &bad, &plant, &proj, &model, &qdot),
            Err(Error::InvalidTarget(_))
        ));
    }
}
