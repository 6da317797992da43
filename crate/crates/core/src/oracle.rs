//! Reference computations that do not share code paths with the projection model.
//!
//! These are used by the invariant battery and the test suites as ground
//! truth. They favour directness over speed.

use nalgebra::{DMatrix, DVector};

/// Largest violation of the four Moore–Penrose conditions for a candidate `x = A⁺`.
pub fn moore_penrose_residual(a: &DMatrix<f64>, x: &DMatrix<f64>) -> f64 {
    let axa = a * x * a - a;
    let xax = x * a * x - x;
    let ax = a * x;
    let xa = x * a;
    let sym_ax = &ax - ax.transpose();
    let sym_xa = &xa - xa.transpose();
    [axa.amax(), xax.amax(), sym_ax.amax(), sym_xa.amax()]
        .into_iter()
        .fold(0.0, f64::max)
}

/// Exact rank of an integer matrix by fraction-free (Bareiss) elimination.
pub fn integer_rank(rows: &[Vec<i64>]) -> usize {
    let mut m: Vec<Vec<i128>> = rows
        .iter()
        .map(|r| r.iter().map(|&x| x as i128).collect())
        .collect();
    let nrows = m.len();
    if nrows == 0 {
        return 0;
    }
    let ncols = m[0].len();
    let mut rank = 0;
    let mut prev_pivot: i128 = 1;
    for col in 0..ncols {
        if rank == nrows {
            break;
        }
        let Some(pivot_row) = (rank..nrows).find(|&r| m[r][col] != 0) else {
            continue;
        };
        m.swap(rank, pivot_row);
        let pivot = m[rank][col];
        for r in (rank + 1)..nrows {
            let factor = m[r][col];
            for c in 0..ncols {
                m[r][c] = (pivot * m[r][c] - factor * m[rank][c]) / prev_pivot;
            }
        }
        prev_pivot = pivot;
        rank += 1;
    }
    rank
}

/// Pseudo-inverse computed by nalgebra's own routine with an absolute cutoff `eps · σ_max`.
pub fn reference_pinv(a: &DMatrix<f64>, rel_eps: f64) -> DMatrix<f64> {
    let (m, n) = a.shape();
    let smax = a.clone().singular_values().max();
    if smax == 0.0 {
        return DMatrix::zeros(n, m);
    }
    a.clone()
        .pseudo_inverse(rel_eps * smax)
        .expect("eps is non-negative")
}

/// Pseudo-inverse of a symmetric matrix from its eigendecomposition, dropping
/// eigenvalues with `|λ| ≤ rel_eps · max|λ|`.
pub fn symmetric_pinv(a: &DMatrix<f64>, rel_eps: f64) -> DMatrix<f64> {
    let n = a.nrows();
    let eig = a.clone().symmetric_eigen();
    let lmax = eig.eigenvalues.amax();
    let mut pinv = DMatrix::zeros(n, n);
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if l.abs() > rel_eps * lmax {
            let w = eig.eigenvectors.column(i);
            pinv += (w * w.transpose()) / l;
        }
    }
    pinv
}

/// Solution of the augmented constrained-dynamics system.
#[derive(Debug, Clone)]
pub struct KktSolution {
    pub acceleration: DVector<f64>,
    pub multipliers: DVector<f64>,
    /// `f_c = −Aᵀλ`.
    pub constraint_force: DVector<f64>,
}

/// Minimum-norm least-squares solution of
///
/// ```text
/// [ M  Aᵀ ] [ q̈ ]   [ f + f_g − C q̇ ]
/// [ A  0  ] [ λ  ] = [ −Ȧ q̇          ]
/// ```
///
/// Works for rank-deficient `A`, where `λ` is not unique but `q̈` and `Aᵀλ` are.
#[allow(clippy::too_many_arguments)]
pub fn kkt_solve(
    mass: &DMatrix<f64>,
    coriolis: &DMatrix<f64>,
    gravity: &DVector<f64>,
    a: &DMatrix<f64>,
    a_dot: &DMatrix<f64>,
    force: &DVector<f64>,
    qdot: &DVector<f64>,
) -> KktSolution {
    let n = mass.nrows();
    let m = a.nrows();
    let mut kkt = DMatrix::zeros(n + m, n + m);
    kkt.view_mut((0, 0), (n, n)).copy_from(mass);
    kkt.view_mut((0, n), (n, m)).copy_from(&a.transpose());
    kkt.view_mut((n, 0), (m, n)).copy_from(a);

    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n)
        .copy_from(&(force + gravity - coriolis * qdot));
    rhs.rows_mut(n, m).copy_from(&(-(a_dot * qdot)));

    let sol = symmetric_pinv(&kkt, 1e-11) * rhs;
    let acceleration = sol.rows(0, n).into_owned();
    let multipliers = sol.rows(n, m).into_owned();
    let constraint_force = -(a.transpose() * &multipliers);
    KktSolution {
        acceleration,
        multipliers,
        constraint_force,
    }
}

/// Condition number from a sorted-or-not list of positive eigenvalues.
pub fn cond_from_eigenvalues(eigs: &[f64]) -> f64 {
    let max = eigs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = eigs.iter().copied().fold(f64::INFINITY, f64::min);
    max / min
}
