//! Orthogonal projection onto the admissible-velocity space and its derived operators.
//!
//! Everything here is a pure function of the constraint matrix `A` and its
//! time derivative `Ȧ`. The pseudo-inverse is realized by singular-value
//! truncation, so `P` stays well defined when `A` loses rank.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::{Error, Result};

/// Constraint matrix `A` (m×n) together with its total time derivative `Ȧ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintJacobian {
    pub a: DMatrix<f64>,
    pub a_dot: DMatrix<f64>,
}

impl ConstraintJacobian {
    pub fn new(a: DMatrix<f64>, a_dot: DMatrix<f64>) -> Result<Self> {
        if a.shape() != a_dot.shape() {
            return Err(Error::DimensionMismatch(format!(
                "A is {:?} but Ȧ is {:?}",
                a.shape(),
                a_dot.shape()
            )));
        }
        ensure_finite(&a, "A")?;
        ensure_finite(&a_dot, "Ȧ")?;
        Ok(Self { a, a_dot })
    }

    /// A constraint matrix that does not change in time.
    pub fn stationary(a: DMatrix<f64>) -> Result<Self> {
        let a_dot = DMatrix::zeros(a.nrows(), a.ncols());
        Self::new(a, a_dot)
    }

    pub fn dof(&self) -> usize {
        self.a.ncols()
    }

    pub fn num_constraints(&self) -> usize {
        self.a.nrows()
    }
}

/// `P`, `Q`, `Λ`, `Ṗ`, `Ω` and the numerical rank of `A` at one state.
#[derive(Debug, Clone)]
pub struct ProjectorBundle {
    /// Orthogonal projector onto `𝒩(A)`.
    pub p: DMatrix<f64>,
    /// Complementary projector `I − P` onto `𝒩⊥(A)`.
    pub q: DMatrix<f64>,
    /// `Λ = −A⁺Ȧ`.
    pub lambda: DMatrix<f64>,
    /// `Ṗ = ΛP + PΛᵀ`.
    pub p_dot: DMatrix<f64>,
    /// `Ω = Λ − Λᵀ`, skew-symmetric.
    pub omega: DMatrix<f64>,
    /// Pseudo-inverse of `A`.
    pub a_pinv: DMatrix<f64>,
    /// Numerical rank of `A`.
    pub rank: usize,
}

impl ProjectorBundle {
    pub fn dof(&self) -> usize {
        self.p.nrows()
    }

    /// Dimension of the admissible velocity space, `n − r`.
    pub fn freedom(&self) -> usize {
        self.dof() - self.rank
    }

    /// Bundle for a system with no active constraints: `P = I`, everything else zero.
    pub fn unconstrained(n: usize) -> Self {
        Self {
            p: DMatrix::identity(n, n),
            q: DMatrix::zeros(n, n),
            lambda: DMatrix::zeros(n, n),
            p_dot: DMatrix::zeros(n, n),
            omega: DMatrix::zeros(n, n),
            a_pinv: DMatrix::zeros(n, 0),
            rank: 0,
        }
    }
}

fn ensure_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} has non-finite entries")))
    }
}

/// Moore–Penrose pseudo-inverse by truncated singular-value decomposition.
///
/// Singular values `σ ≤ rank_tol · σ_max` are treated as zero. Returns the
/// pseudo-inverse (n×m) and the numerical rank. The zero matrix maps to the
/// zero matrix with rank 0.
pub fn pseudo_inverse(a: &DMatrix<f64>, rank_tol: f64) -> Result<(DMatrix<f64>, usize)> {
    let (pinv, rank, _) = truncated_svd_pinv(a, rank_tol, 0.0)?;
    Ok((pinv, rank))
}

/// Like [`pseudo_inverse`], with the cutoff measured against `max(σ_max, scale)`.
///
/// Used when `a` is a product such as `PB` whose own largest singular value
/// may be pure round-off.
pub fn pseudo_inverse_scaled(
    a: &DMatrix<f64>,
    rank_tol: f64,
    scale: f64,
) -> Result<(DMatrix<f64>, usize)> {
    let (pinv, rank, _) = truncated_svd_pinv(a, rank_tol, scale)?;
    Ok((pinv, rank))
}

/// Truncated pseudo-inverse plus an orthonormal basis of the row space.
///
/// The singular triplets come from the symmetric eigendecomposition of
/// `[0 A; Aᵀ 0]`, whose eigenvalues are `±σᵢ` with eigenvectors `(uᵢ, ±vᵢ)/√2`.
/// This keeps the conditioning of `A` (unlike `AᵀA`) and reconstructs
/// matrices with clustered zero singular values reliably.
fn truncated_svd_pinv(
    a: &DMatrix<f64>,
    rank_tol: f64,
    scale: f64,
) -> Result<(DMatrix<f64>, usize, DMatrix<f64>)> {
    if !(rank_tol.is_finite() && rank_tol > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "rank_tol must be positive, got {rank_tol}"
        )));
    }
    ensure_finite(a, "matrix")?;
    let (m, n) = a.shape();
    if m == 0 || n == 0 || a.amax() == 0.0 {
        return Ok((DMatrix::zeros(n, m), 0, DMatrix::zeros(n, 0)));
    }

    let mut jw = DMatrix::zeros(m + n, m + n);
    jw.view_mut((0, m), (m, n)).copy_from(a);
    jw.view_mut((m, 0), (n, m)).copy_from(&a.transpose());
    let eig = SymmetricEigen::new(jw);
    let sigma_max = eig.eigenvalues.max();
    let cutoff = rank_tol * sigma_max.max(scale);

    let mut kept: Vec<usize> = (0..m + n).filter(|&i| eig.eigenvalues[i] > cutoff).collect();
    kept.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let rank = kept.len();

    let mut pinv = DMatrix::zeros(n, m);
    let mut v_r = DMatrix::zeros(n, rank);
    for (col, &i) in kept.iter().enumerate() {
        let w = eig.eigenvectors.column(i);
        let u_i = w.rows(0, m).normalize();
        let v_i = w.rows(m, n).normalize();
        pinv += (&v_i * u_i.transpose()) / eig.eigenvalues[i];
        v_r.set_column(col, &v_i);
    }
    let row_space = if rank > 0 { v_r.qr().q() } else { v_r };
    Ok((pinv, rank, row_space))
}

/// Builds `P = I − A⁺A`, `Q`, `Λ = −A⁺Ȧ`, `Ṗ = ΛP + PΛᵀ` and `Ω = Λ − Λᵀ`.
pub fn build_projectors(jac: &ConstraintJacobian, rank_tol: f64) -> Result<ProjectorBundle> {
    let n = jac.dof();
    let (a_pinv, rank, row_space) = truncated_svd_pinv(&jac.a, rank_tol, 0.0)?;

    // A⁺A = V_r V_rᵀ for the retained right singular vectors.
    let a_pinv_a = &row_space * row_space.transpose();
    let identity = DMatrix::<f64>::identity(n, n);
    let p = symmetrize(&(&identity - a_pinv_a));
    let q = &identity - &p;

    let lambda = -(&a_pinv * &jac.a_dot);
    let lp = &lambda * &p;
    let p_dot = &lp + lp.transpose();
    let omega = &lambda - lambda.transpose();

    Ok(ProjectorBundle {
        p,
        q,
        lambda,
        p_dot,
        omega,
        a_pinv,
        rank,
    })
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Central finite-difference check of `Ṗ = ΛP + PΛᵀ` along a time-indexed constraint family.
///
/// Returns `‖(P(t+h) − P(t−h))/(2h) − (ΛP + PΛᵀ)(t)‖_F`. The residual decays as
/// `O(h²)` while the rank of `A` is constant around `t`.
pub fn pdot_fd_check<F>(jac_at: F, t: f64, h: f64, rank_tol: f64) -> Result<f64>
where
    F: Fn(f64) -> Result<ConstraintJacobian>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!("step h must be positive, got {h}")));
    }
    let center = build_projectors(&jac_at(t)?, rank_tol)?;
    let plus = build_projectors(&jac_at(t + h)?, rank_tol)?;
    let minus = build_projectors(&jac_at(t - h)?, rank_tol)?;
    let fd = (plus.p - minus.p) / (2.0 * h);
    Ok((fd - center.p_dot).norm())
}

/// Splits `v` into `(Pv, Qv)`.
pub fn split(proj: &ProjectorBundle, v: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let par = &proj.p * v;
    let perp = v - &par;
    (par, perp)
}
