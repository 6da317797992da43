//! Projection-based non-minimal-order dynamics for constrained multibody systems.
//!
//! The crate models a mechanical system in dependent coordinates `q ∈ ℝⁿ`
//! subject to Pfaffian constraints `A(q) q̇ = 0`. Instead of eliminating
//! coordinates it works with the orthogonal projector `P` onto `𝒩(A)`:
//!
//! ```text
//! M̄ q̈ + C̄ q̇ = P (f + f_g)
//! M̄ = P M P + μ Q
//! C̄ = P C P + P M (Λ P + P Λᵀ) − μ Λ P,     Λ = −A⁺ Ȧ
//! ```
//!
//! `M̄` is symmetric positive definite for every `μ > 0`, including at
//! configurations where `A` loses rank, and all matrices keep dimension `n`
//! when constraints switch on or off.
//!
//! Layout:
//!
//! - [`projection`]: pseudo-inverse, `P`, `Q`, `Λ`, `Ṗ`, `Ω`.
//! - [`model`]: `M̄`, `C̄`, spectrum and virtual-mass selection.
//! - [`forces`]: accelerations, constraint forces, oblique projectors `R`, `S`.
//! - [`control`]: setpoint regulation of dependent coordinates.
//! - [`system`] and [`catalog`]: system definitions and benchmark systems.
//! - [`sim`]: fixed-step integration, topology events, traces.
//! - [`definition`]: TOML user systems and scenario files.
//! - [`oracle`]: independent reference computations used for validation.
//! - [`battery`]: the invariant battery behind `projdyn check`.

pub mod battery;
pub mod catalog;
pub mod control;
pub mod definition;
pub mod error;
pub mod forces;
pub mod model;
pub mod oracle;
pub mod projection;
pub mod sim;
pub mod system;
pub mod trace;

pub use error::{Error, Result};

/// Default relative rank tolerance (singular values below `rank_tol · σ_max` are dropped).
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Environment variable that overrides [`DEFAULT_RANK_TOL`].
pub const RANK_TOL_ENV: &str = "PROJDYN_RANK_TOL";

/// Resolves the rank tolerance from an explicit value, then the environment, then the default.
pub fn resolve_rank_tol(explicit: Option<f64>) -> Result<f64> {
    let tol = match explicit {
        Some(v) => v,
        None => match std::env::var(RANK_TOL_ENV) {
            Ok(s) => s.trim().parse::<f64>().map_err(|_| {
                Error::InvalidParameter(format!("{RANK_TOL_ENV}={s:?} is not a number"))
            })?,
            Err(_) => DEFAULT_RANK_TOL,
        },
    };
    if !(tol.is_finite() && tol > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "rank tolerance must be positive and finite, got {tol}"
        )));
    }
    Ok(tol)
}
