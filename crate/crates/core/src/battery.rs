//! Invariant battery behind `projdyn check`.
//!
//! Each suite draws its own seeded random instances, so suites run in
//! parallel and a given seed reproduces identical residuals.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::catalog::{self, SliderCrank};
use crate::control::RegulationGains;
use crate::forces;
use crate::model::{self, MuPolicy, PlantMatrices};
use crate::oracle;
use crate::projection::{build_projectors, pdot_fd_check, pseudo_inverse_scaled, ConstraintJacobian, ProjectorBundle};
use crate::sim::{self, GeneralizedState, Scenario};
use crate::system::{jacobian_at, plant_at, self_test, ConstraintSet, MechanicalSystem};
use crate::Result;

/// Deliberate defects for testing the harness itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Flips the sign of the `μΛP` term of `C̄`.
    CbarSign,
}

#[derive(Debug, Clone)]
pub struct BatteryConfig {
    pub seed: u64,
    /// Random instances per suite.
    pub samples: usize,
    pub rank_tol: f64,
    pub fault: Option<Fault>,
}

impl Default for BatteryConfig {
    fn default() -> Self {
        Self { seed: 0, samples: 200, rank_tol: crate::DEFAULT_RANK_TOL, fault: None }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct CheckResult {
    pub suite: String,
    pub invariant: String,
    pub samples: usize,
    pub max_residual: f64,
    pub tolerance: f64,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BatteryReport {
    pub seed: u64,
    pub samples: usize,
    pub fault: Option<Fault>,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl BatteryReport {
    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// Running maximum of one residual.
struct Tracker {
    suite: &'static str,
    invariant: &'static str,
    tolerance: f64,
    samples: usize,
    max: f64,
}

impl Tracker {
    fn new(suite: &'static str, invariant: &'static str, tolerance: f64) -> Self {
        Self { suite, invariant, tolerance, samples: 0, max: 0.0 }
    }

    fn observe(&mut self, residual: f64) {
        self.samples += 1;
        // NaN counts as a failure
        self.max = if residual.is_nan() { f64::INFINITY } else { self.max.max(residual) };
    }

    fn finish(self) -> CheckResult {
        CheckResult {
            suite: self.suite.into(),
            invariant: self.invariant.into(),
            samples: self.samples,
            max_residual: self.max,
            tolerance: self.tolerance,
            passed: self.samples > 0 && self.max <= self.tolerance,
            error: None,
        }
    }
}

type Suite = fn(&BatteryConfig, &mut ChaCha8Rng) -> Result<Vec<CheckResult>>;

const SUITES: [(&str, Suite); 9] = [
    ("projector-algebra", projector_algebra),
    ("constraint-inertia", constraint_inertia),
    ("skew-symmetry", skew_symmetry),
    ("virtual-mass", virtual_mass),
    ("kkt-oracle", kkt_oracle),
    ("oblique-projectors", oblique_projectors),
    ("regulation", regulation),
    ("simulation", simulation),
    ("catalog", catalog_self_test),
];

pub fn suite_names() -> Vec<&'static str> {
    SUITES.iter().map(|(n, _)| *n).collect()
}

/// Runs every suite and collects the results in a fixed order.
pub fn run_battery(config: &BatteryConfig) -> BatteryReport {
    let checks: Vec<CheckResult> = SUITES
        .par_iter()
        .enumerate()
        .map(|(i, (name, suite))| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64));
            suite(config, &mut rng).unwrap_or_else(|e| {
                vec![CheckResult {
                    suite: name.to_string(),
                    invariant: "suite-completed".into(),
                    samples: 0,
                    max_residual: f64::INFINITY,
                    tolerance: 0.0,
                    passed: false,
                    error: Some(e.to_string()),
                }]
            })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    BatteryReport {
        seed: config.seed,
        samples: config.samples,
        fault: config.fault,
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}

/// Random instances shared by the battery and the acceptance tests.
pub mod sampling {
    use super::*;

    pub fn uniform_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
    }

    pub fn uniform_vector<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.random_range(-scale..scale))
    }

    /// `G Gᵀ / n + I/2`, eigenvalues roughly in `[0.5, 3]`.
    pub fn spd_matrix<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DMatrix<f64> {
        let g = uniform_matrix(rng, n, n, 1.0);
        let m = &g * g.transpose() / n as f64 + DMatrix::identity(n, n) * 0.5;
        crate::projection::symmetrize(&m)
    }

    fn sigma_ratio(a: &DMatrix<f64>, r: usize) -> f64 {
        if r == 0 {
            return 1.0;
        }
        let mut s: Vec<f64> = a.clone().singular_values().iter().copied().collect();
        s.sort_by(|x, y| y.total_cmp(x));
        s[r - 1] / s[0]
    }

    /// Constant-rank family `A(t) = (U₀ + tU₁)(V₀ + tV₁)` with `rank A = r`.
    #[derive(Debug, Clone)]
    pub struct JacobianFamily {
        pub u0: DMatrix<f64>,
        pub u1: DMatrix<f64>,
        pub v0: DMatrix<f64>,
        pub v1: DMatrix<f64>,
        pub rank: usize,
    }

    impl JacobianFamily {
        /// `m × n` family of rank `r`, resampled until `σ_r/σ_1 ≥ 0.05` at `t = 0`.
        pub fn random<R: Rng + ?Sized>(rng: &mut R, n: usize, m: usize, r: usize) -> Self {
            assert!(r <= m.min(n));
            loop {
                let fam = Self {
                    u0: uniform_matrix(rng, m, r, 1.0),
                    u1: uniform_matrix(rng, m, r, 0.5),
                    v0: uniform_matrix(rng, r, n, 1.0),
                    v1: uniform_matrix(rng, r, n, 0.5),
                    rank: r,
                };
                if sigma_ratio(&fam.a(0.0), r) >= 0.05 {
                    return fam;
                }
            }
        }

        /// Random dimensions `n ≤ max_n`, `m ≤ n + 1`, any rank including 0 and deficient.
        pub fn random_dims<R: Rng + ?Sized>(rng: &mut R, max_n: usize) -> Self {
            let n = rng.random_range(1..=max_n);
            let m = rng.random_range(1..=n + 1);
            let r = rng.random_range(0..=m.min(n));
            Self::random(rng, n, m, r)
        }

        pub fn dof(&self) -> usize {
            self.v0.ncols()
        }

        pub fn a(&self, t: f64) -> DMatrix<f64> {
            (&self.u0 + &self.u1 * t) * (&self.v0 + &self.v1 * t)
        }

        pub fn a_dot(&self, t: f64) -> DMatrix<f64> {
            &self.u1 * (&self.v0 + &self.v1 * t) + (&self.u0 + &self.u1 * t) * &self.v1
        }

        pub fn at(&self, t: f64) -> Result<ConstraintJacobian> {
            ConstraintJacobian::new(self.a(t), self.a_dot(t))
        }
    }

    /// Random plant with `M ≻ 0`, arbitrary `C`, `f_g` and a `k`-column input map.
    pub fn plant<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize) -> PlantMatrices {
        PlantMatrices {
            mass: spd_matrix(rng, n),
            coriolis: uniform_matrix(rng, n, n, 1.0),
            gravity: uniform_vector(rng, n, 2.0),
            input_map: uniform_matrix(rng, n, k, 1.0),
        }
    }

    /// Input map with `rank(PB) = n − r` and `σ_min≠0(PB) ≥ 0.1·σ_max(B)`, so `‖R‖ ≤ 10`.
    pub fn admissible_input_map<R: Rng + ?Sized>(rng: &mut R, proj: &ProjectorBundle, k: usize) -> DMatrix<f64> {
        let n = proj.dof();
        let free = proj.freedom();
        assert!(k >= free);
        loop {
            let b = uniform_matrix(rng, n, k, 1.0);
            if free == 0 {
                return b;
            }
            let mut s: Vec<f64> = (&proj.p * &b).singular_values().iter().copied().collect();
            s.sort_by(|x, y| y.total_cmp(x));
            if s[free - 1] >= 0.1 * b.clone().singular_values().max() {
                return b;
            }
        }
    }

    /// Log-uniform `μ ∈ [lo, hi]`.
    pub fn log_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
        (rng.random_range(lo.ln()..hi.ln())).exp()
    }
}

use sampling::JacobianFamily;

fn projector_algebra(cfg: &BatteryConfig, rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let s = "projector-algebra";
    let mut idem = Tracker::new(s, "P² = P", 1e-10);
    let mut sym = Tracker::new(s, "Pᵀ = P", 1e-10);
    let mut ap = Tracker::new(s, "AP = 0", 1e-10);
    let mut pl = Tracker::new(s, "PΛ = 0", 1e-10);
    let mut ltp = Tracker::new(s, "ΛᵀP = 0", 1e-10);
    let mut pinv = Tracker::new(s, "Moore-Penrose conditions", 1e-10);
    let mut pdot = Tracker::new(s, "Ṗ matches central differences (h = 1e-5)", 1e-6);
    for _ in 0..cfg.samples {
        let fam = JacobianFamily::random_dims(rng, 8);
        let jac = fam.at(0.0)?;
        let pb = build_projectors(&jac, cfg.rank_tol)?;
        idem.observe((&pb.p * &pb.p - &pb.p).amax());
        sym.observe((&pb.p - pb.p.transpose()).amax());
        ap.observe((&jac.a * &pb.p).amax());
        pl.observe((&pb.p * &pb.lambda).amax());
        ltp.observe((pb.lambda.transpose() * &pb.p).amax());
        pinv.observe(oracle::moore_penrose_residual(&jac.a, &pb.a_pinv));
        pdot.observe(pdot_fd_check(|t| fam.at(t), 0.0, 1e-5, cfg.rank_tol)?);
    }
    Ok([idem, sym, ap, pl, ltp, pinv, pdot].into_iter().map(Tracker::finish).collect())
}

fn constraint_inertia(cfg: &BatteryConfig, rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let s = "constraint-inertia";
    let mut lower = Tracker::new(s, "min eig(M̄) ≥ min(μ, λmin≠0(PMP))", 1e-9);
    let mut inverse = Tracker::new(s, "‖M̄M̄⁻¹ − I‖", 1e-9);
    let mut law = Tracker::new(s, "spec(M̄) = {μ}ʳ ∪ eig≠0(PMP)", 1e-9);
    let mut check = |plant: &PlantMatrices, proj: &ProjectorBundle, mu: f64| -> Result<()> {
        let m = model::assemble(plant, proj, mu)?;
        let nonzero = model::projected_inertia_eigenvalues(plant, proj, cfg.rank_tol);
        let bound = nonzero.first().copied().unwrap_or(mu).min(mu);
        lower.observe((bound - m.spectrum[0]).max(0.0));
        let n = plant.dof();
        inverse.observe((&m.mbar * m.inverse()? - DMatrix::identity(n, n)).amax());
        let mut expected: Vec<f64> = nonzero.clone();
        expected.extend(std::iter::repeat_n(mu, n - nonzero.len()));
        expected.sort_by(f64::total_cmp);
        let scale = expected.last().copied().unwrap_or(1.0).max(1.0);
        let dev = expected.iter().zip(&m.spectrum).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        law.observe(dev / scale);
        Ok(())
    };
    for _ in 0..cfg.samples {
        let fam = JacobianFamily::random_dims(rng, 8);
        let n = fam.dof();
        let proj = build_projectors(&fam.at(0.0)?, cfg.rank_tol)?;
        let plant = sampling::plant(rng, n, n);
        check(&plant, &proj, sampling::log_uniform(rng, 1e-2, 1e2))?;
    }
    // the slider-crank stretch configuration, where rank(A) drops
    let sc = SliderCrank::default();
    let q = sc.singular_configuration();
    let zero = DVector::zeros(q.len());
    let proj = build_projectors(&jacobian_at(&sc, &sc.initial_constraints(), &q, &zero)?, cfg.rank_tol)?;
    let plant = plant_at(&sc, &q, &zero);
    for mu in [1e-2, 0.5, 1.0, 3.0, 1e2] {
        check(&plant, &proj, mu)?;
    }
    Ok([lower, inverse, law].into_iter().map(Tracker::finish).collect())
}

/// `C̄` with the optional injected fault.
fn cbar(cfg: &BatteryConfig, m: &model::ConstrainedModel, proj: &ProjectorBundle) -> DMatrix<f64> {
    match cfg.fault {
        Some(Fault::CbarSign) => &m.cbar + &proj.lambda * &proj.p * (2.0 * m.mu),
        None => m.cbar.clone(),
    }
}

fn skew_symmetry(cfg: &BatteryConfig, rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut skew = Tracker::new("skew-symmetry", "(dM̄/dt − 2C̄) + (dM̄/dt − 2C̄)ᵀ", 1e-6);
    let h = 1e-5;
    let per_system = (cfg.samples / 5).max(1);
    for entry in catalog::catalog() {
        let sys = entry.system.as_ref();
        let active = ConstraintSet::all(sys.num_constraints());
        for _ in 0..per_system {
            let (q, qdot) = entry.sample_state(rng, &active)?;
            let mu = sampling::log_uniform(rng, 0.1, 10.0);
            let mbar_at = |q: &DVector<f64>| -> Result<DMatrix<f64>> {
                let proj = build_projectors(&jacobian_at(sys, &active, q, &qdot)?, cfg.rank_tol)?;
                Ok(model::assemble(&plant_at(sys, q, &qdot), &proj, mu)?.mbar)
            };
            let mbar_dot = (mbar_at(&(&q + &qdot * h))? - mbar_at(&(&q - &qdot * h))?) / (2.0 * h);
            let proj = build_projectors(&jacobian_at(sys, &active, &q, &qdot)?, cfg.rank_tol)?;
            let m = model::assemble(&plant_at(sys, &q, &qdot), &proj, mu)?;
            let n = mbar_dot - cbar(cfg, &m, &proj) * 2.0;
            skew.observe((&n + n.transpose()).amax());
        }
    }
    Ok(vec![skew.finish()])
}

fn virtual_mass(cfg: &BatteryConfig, rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let s = "virtual-mass";
    let mut minimum = Tracker::new(s, "grid min cond(M̄) = λmax/λmin≠0 (relative)", 1e-9);
    let mut location = Tracker::new(s, "argmin set equals [λmin≠0, λmax]", 0.0);
    for _ in 0..(cfg.samples / 2).max(1) {
        let n = rng.random_range(2..=8);
        let m = rng.random_range(1..n);
        let fam = JacobianFamily::random(rng, n, m, m);
        let proj = build_projectors(&fam.at(0.0)?, cfg.rank_tol)?;
        let plant = sampling::plant(rng, n, n);
        let eig = model::projected_inertia_eigenvalues(&plant, &proj, cfg.rank_tol);
        let (lo, hi) = (eig[0], eig[eig.len() - 1]);
        let best = hi / lo;
        let grid = mu_grid(lo, hi, 200);
        let conds: Vec<f64> = grid
            .iter()
            .map(|&mu| model::spectrum_of_mbar(&plant, &proj, mu).map(|sp| sp.cond))
            .collect::<Result<_>>()?;
        let grid_min = conds.iter().copied().fold(f64::INFINITY, f64::min);
        minimum.observe((grid_min - best).abs() / best);
        let mut misplaced = 0.0;
        for (&mu, &c) in grid.iter().zip(&conds) {
            let at_min = (c - best).abs() <= 1e-9 * best;
            let inside = mu >= lo * (1.0 - 1e-12) && mu <= hi * (1.0 + 1e-12);
            if at_min != inside {
                misplaced += 1.0;
            }
        }
        location.observe(misplaced);
    }
    Ok(vec![minimum.finish(), location.finish()])
}

/// Log grid over `[1e-3·lo, 1e3·hi]` with `lo` and `hi` included.
pub fn mu_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let (a, b) = ((1e-3 * lo).ln(), (1e3 * hi).ln());
    let mut grid: Vec<f64> = (0..points).map(|i| (a + (b - a) * i as f64 / (points - 1) as f64).exp()).collect();
    grid.extend([lo, hi]);
    grid.sort_by(f64::total_cmp);
    grid
}

fn kkt_oracle(cfg: &BatteryConfig, rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let s = "kkt-oracle";
    let mut acc = Tracker::new(s, "q̈ matches augmented-system oracle", 1e-8);
    let mut fc = Tracker::new(s, "f_c matches augmented-system oracle", 1e-8);
    let mut routes = Tracker::new(s, "Ω-form q̈ equals M̄⁻¹(P(f + f_g) − C̄q̇)", 1e-9);
    let mut balance = Tracker::new(s, "Mq̈ + Cq̇ = f + f_g + f_c", 1e-8);
    let per_system = (cfg.samples / 5).max(1);
    for entry in catalog::catalog() {
        let sys = entry.system.as_ref();
        let active = ConstraintSet::all(sys.num_constraints());
        let mut states = Vec::with_capacity(per_system + 1);
        for _ in 0..per_system {
            states.push(entry.sample_state(rng, &active)?);
        }
        if entry.name() == "slider-crank" {
            let q = SliderCrank::default().singular_configuration();
            let v = sampling::uniform_vector(rng, q.len(), 2.0);
            states.push((q.clone(), catalog::admissible_velocity(sys, &active, &q, &v)?));
        }
        for (q, qdot) in states {
            let f = sampling::uniform_vector(rng, q.len(), 5.0);
            let plant = plant_at(sys, &q, &qdot);
            let jac = jacobian_at(sys, &active, &q, &qdot)?;
            let proj = build_projectors(&jac, cfg.rank_tol)?;
            let m = model::assemble(&plant, &proj, sampling::log_uniform(rng, 0.1, 10.0))?;
            let qdd = forces::acceleration(&plant, &proj, &m, &f, &qdot)?;
            let f_c = forces::constraint_force(&plant, &proj, &m, &f, &qdot)?;
            let kkt = oracle::kkt_solve(&plant.mass, &plant.coriolis, &plant.gravity, &jac.a, &jac.a_dot, &f, &qdot);
            acc.observe((&qdd - &kkt.acceleration).amax());
            fc.observe((&f_c - &kkt.constraint_force).amax());
            let via_model = forces::acceleration_via_model(&plant, &proj, &m, &f, &qdot)?;
            routes.observe((&qdd - via_model).amax());
            let lhs = &plant.mass * &qdd + &plant.coriolis * &qdot;
            balance.observe((lhs - (&f + &plant.gravity + &f_c)).amax());
        }
    }
    Ok([acc, fc, routes, balance].into_iter().map(Tracker::finish).collect())
}

fn oblique_projectors(cfg: &BatteryConfig, rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let s = "oblique-projectors";
    let names = ["R² = R", "PR = P", "RP = R", "S² = S", "QS = S", "SQ = Q", "M̄⁻¹P = PM̄⁻¹", "M̄⁻¹P = pinv(PMP)"];
    let mut t: Vec<Tracker> = names.iter().map(|n| Tracker::new(s, n, 1e-10)).collect();
    for _ in 0..cfg.samples {
        let fam = JacobianFamily::random_dims(rng, 8);
        let n = fam.dof();
        let proj = build_projectors(&fam.at(0.0)?, cfg.rank_tol)?;
        let k = rng.random_range(proj.freedom().max(1)..=n + 2);
        let mut plant = sampling::plant(rng, n, k);
        plant.input_map = sampling::admissible_input_map(rng, &proj, k);
        let m = model::assemble(&plant, &proj, sampling::log_uniform(rng, 0.1, 10.0))?;
        let ob = forces::build_oblique(&plant, &proj, &m, cfg.rank_tol)?;
        let (p, q, r, sm) = (&proj.p, &proj.q, &ob.r, &ob.s);
        let minv_p = forces::mbar_inv_p(&proj, &m)?;
        let pmp = p * &plant.mass * p;
        let m_scale = plant.mass.clone().singular_values().max();
        let (pmp_pinv, _) = pseudo_inverse_scaled(&pmp, cfg.rank_tol, m_scale)?;
        let residuals = [
            (r * r - r).amax(),
            (p * r - p).amax(),
            (r * p - r).amax(),
            (sm * sm - sm).amax(),
            (q * sm - sm).amax(),
            (sm * q - q).amax(),
            (&minv_p - m.solve(&p.transpose())?.transpose()).amax(),
            (&minv_p - pmp_pinv).amax(),
        ];
        for (tr, res) in t.iter_mut().zip(residuals) {
            tr.observe(res);
        }
    }
    Ok(t.into_iter().map(Tracker::finish).collect())
}

/// Closed-loop `V̇ = q̇ᵀM̄q̈ + ½q̇ᵀ(dM̄/dt)q̇ + eᵀKp q̇` against `−q̇ᵀKd q̇ − σ‖e‖ q̇ᵀKp q̇/‖q̇‖`.
fn regulation(cfg: &BatteryConfig, rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let s = "regulation";
    let mut identity = Tracker::new(s, "closed-loop V̇ equals the dissipation bound", 1e-6);
    let mut descent = Tracker::new(s, "closed-loop V̇ ≤ 0 (positive part)", 1e-6);
    let h = 1e-5;
    for name in ["pendulum", "double-pendulum"] {
        let entry = catalog::entry(name)?;
        let sys = entry.system.as_ref();
        let n = sys.dof();
        let active = ConstraintSet::all(sys.num_constraints());
        let target = entry.regulation_target.clone().expect("regulation target");
        let gains = RegulationGains::isotropic(n, 10.0, 10.0, 1.5);
        for _ in 0..(cfg.samples / 2).max(1) {
            let (q, qdot) = entry.sample_state(rng, &active)?;
            if qdot.norm() < 1e-3 {
                continue;
            }
            let mu = sampling::log_uniform(rng, 0.1, 10.0);
            let mbar_at = |q: &DVector<f64>| -> Result<DMatrix<f64>> {
                let proj = build_projectors(&jacobian_at(sys, &active, q, &qdot)?, cfg.rank_tol)?;
                Ok(model::assemble(&plant_at(sys, q, &qdot), &proj, mu)?.mbar)
            };
            let mbar_dot = (mbar_at(&(&q + &qdot * h))? - mbar_at(&(&q - &qdot * h))?) / (2.0 * h);
            let plant = plant_at(sys, &q, &qdot);
            let proj = build_projectors(&jacobian_at(sys, &active, &q, &qdot)?, cfg.rank_tol)?;
            let m = model::assemble(&plant, &proj, mu)?;
            let f = crate::control::control_force(&q, &qdot, &target, &gains, &plant, &proj, 0.0, cfg.rank_tol)?.f;
            let qdd = forces::acceleration(&plant, &proj, &m, &f, &qdot)?;
            let e = &q - &target;
            let v_dot = qdot.dot(&(&m.mbar * &qdd)) + 0.5 * qdot.dot(&(&mbar_dot * &qdot)) + e.dot(&(&gains.kp * &qdot));
            let bound = -qdot.dot(&(&gains.kd * &qdot))
                - gains.sigma * e.norm() * qdot.dot(&(&gains.kp * &qdot)) / qdot.norm();
            identity.observe((v_dot - bound).abs() / (1.0 + bound.abs()));
            descent.observe(v_dot.max(0.0));
        }
    }
    Ok(vec![identity.finish(), descent.finish()])
}

fn simulation(cfg: &BatteryConfig, _rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let s = "simulation";
    let mut drift = Tracker::new(s, "‖Aq̇‖ / (1 + ‖q̇‖) after each step", 1e-12);
    let mut energy = Tracker::new(s, "relative energy drift, unforced pendulum 2 s", 1e-5);
    for entry in catalog::catalog() {
        let (q, qdot) = entry.initial_state.clone();
        let mut scenario = Scenario::new(entry.system.clone(), GeneralizedState::new(0.0, q, qdot), 2.0, 1e-3);
        scenario.events = entry.events.clone();
        scenario.rank_tol = cfg.rank_tol;
        scenario.mu_policy = MuPolicy::GeometricMean;
        let trace = sim::run(&scenario)?;
        for r in &trace.records {
            drift.observe(r.drift_velocity / (1.0 + r.qdot_vec().norm()));
        }
        if entry.name() == "pendulum" {
            energy.observe(trace.relative_energy_drift());
        }
    }
    Ok(vec![drift.finish(), energy.finish()])
}

fn catalog_self_test(cfg: &BatteryConfig, rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let s = "catalog";
    let mut sym = Tracker::new(s, "M = Mᵀ", 1e-12);
    let mut pd = Tracker::new(s, "M ≻ 0 (1 if violated)", 0.0);
    let mut skew = Tracker::new(s, "Ṁ − 2C skew-symmetric", 1e-8);
    let mut rate = Tracker::new(s, "Ȧ matches central differences", 1e-6);
    let mut grad = Tracker::new(s, "A = ∂Φ/∂q", 1e-6);
    let per_system = (cfg.samples / 2).max(1);
    for entry in catalog::catalog() {
        let sys: Arc<dyn MechanicalSystem> = entry.system.clone();
        let active = ConstraintSet::all(sys.num_constraints());
        let report = self_test(sys.as_ref(), per_system, rng, |rng| {
            entry.sample_state(rng, &active).expect("catalog sample")
        });
        sym.observe(report.mass_asymmetry);
        pd.observe(if report.min_mass_eigenvalue > 0.0 { 0.0 } else { 1.0 });
        skew.observe(report.skew_violation);
        rate.observe(report.rate_residual);
        grad.observe(report.residual_gradient_error);
    }
    Ok([sym, pd, skew, rate, grad].into_iter().map(Tracker::finish).collect())
}
