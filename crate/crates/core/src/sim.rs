//! Fixed-step integration of the non-minimal-order model.
//!
//! Each step is a classical fourth-order Runge–Kutta update of `(q, q̇)` with
//! accelerations from [`forces::acceleration`], followed by the velocity
//! projection `q̇ ← P(q) q̇`. Scheduled topology events split the step at the
//! event time; newly activated constraints capture the motion inelastically.

use std::sync::Arc;

use log::{debug, info, warn};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::control::{RegulationGains, Regulator};
use crate::forces;
use crate::model::{self, ConstrainedModel, MuPolicy, PlantMatrices};
use crate::projection::{build_projectors, pseudo_inverse, ProjectorBundle};
use crate::system::{jacobian_at, plant_at, residual_at, ConstraintSet, MechanicalSystem};
use crate::trace::{RankEvent, RankEventCause, SimulationTrace, TraceRecord};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GeneralizedState {
    pub t: f64,
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
}

impl GeneralizedState {
    pub fn new(t: f64, q: DVector<f64>, qdot: DVector<f64>) -> Self {
        Self { t, q, qdot }
    }

    fn is_finite(&self) -> bool {
        self.t.is_finite() && self.q.iter().chain(self.qdot.iter()).all(|x| x.is_finite())
    }

    fn flatten(&self) -> Vec<f64> {
        std::iter::once(self.t).chain(self.q.iter().copied()).chain(self.qdot.iter().copied()).collect()
    }
}

/// Scheduled change of the active constraint set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyEvent {
    pub time: f64,
    #[serde(default)]
    pub activate: Vec<usize>,
    #[serde(default)]
    pub deactivate: Vec<usize>,
}

#[derive(Debug, Clone)]
pub enum Controller {
    None,
    /// Piecewise-constant generalized force; each entry holds from its time onward.
    OpenLoop(Vec<(f64, DVector<f64>)>),
    Regulate {
        gains: RegulationGains,
        target: DVector<f64>,
    },
}

/// A fully resolved simulation setup.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub system: Arc<dyn MechanicalSystem>,
    pub initial: GeneralizedState,
    pub horizon: f64,
    pub dt: f64,
    pub mu_policy: MuPolicy,
    pub controller: Controller,
    pub events: Vec<TopologyEvent>,
    pub initial_constraints: ConstraintSet,
    pub rank_tol: f64,
    /// Position retraction onto `Φ = 0` every this many steps.
    pub retract_every: Option<usize>,
}

impl Scenario {
    pub fn new(system: Arc<dyn MechanicalSystem>, initial: GeneralizedState, horizon: f64, dt: f64) -> Self {
        let initial_constraints = system.initial_constraints();
        Self {
            system,
            initial,
            horizon,
            dt,
            mu_policy: MuPolicy::default(),
            controller: Controller::None,
            events: Vec::new(),
            initial_constraints,
            rank_tol: crate::DEFAULT_RANK_TOL,
            retract_every: None,
        }
    }

    /// Number of integration steps, `horizon / dt` rounded to the nearest integer.
    pub fn num_steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.system.dof();
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("step size must be positive, got {}", self.dt)));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidParameter(format!("horizon must be non-negative, got {}", self.horizon)));
        }
        if self.initial.q.len() != n || self.initial.qdot.len() != n {
            return Err(Error::DimensionMismatch(format!("initial state must have dimension {n}")));
        }
        if !self.initial.is_finite() {
            return Err(Error::InvalidInput("initial state is not finite".into()));
        }
        if self.initial_constraints.len() != self.system.num_constraints() {
            return Err(Error::DimensionMismatch("constraint set size differs from m".into()));
        }
        if self.events.windows(2).any(|w| w[1].time < w[0].time) {
            return Err(Error::InvalidParameter("events must be time-ordered".into()));
        }
        let m = self.system.num_constraints();
        for ev in &self.events {
            if ev.activate.iter().chain(&ev.deactivate).any(|&i| i >= m) {
                return Err(Error::InvalidParameter(format!("event at t = {} names a constraint ≥ {m}", ev.time)));
            }
        }
        if let Some(phi) = residual_at(self.system.as_ref(), &self.initial_constraints, &self.initial.q) {
            if phi.norm() > 1e-8 {
                return Err(Error::InconsistentInitialState { residual: phi.norm(), iterations: 0 });
            }
        }
        match &self.controller {
            Controller::Regulate { gains, target } => {
                gains.validate()?;
                if target.len() != n || gains.kp.nrows() != n {
                    return Err(Error::DimensionMismatch(format!("controller must have dimension {n}")));
                }
                if let Some(phi) = residual_at(self.system.as_ref(), &self.initial_constraints, target) {
                    if phi.norm() > 1e-8 {
                        return Err(Error::InvalidTarget(format!(
                            "target violates the constraints: ‖Φ(q*)‖ = {:e}",
                            phi.norm()
                        )));
                    }
                }
            }
            Controller::OpenLoop(schedule) => {
                if schedule.iter().any(|(_, f)| f.len() != n) {
                    return Err(Error::DimensionMismatch(format!("open-loop forces must have dimension {n}")));
                }
            }
            Controller::None => {}
        }
        Ok(())
    }
}

/// Everything evaluated at one `(t, q, q̇)`.
struct Evaluation {
    plant: PlantMatrices,
    proj: ProjectorBundle,
    model: ConstrainedModel,
    f: DVector<f64>,
    u: DVector<f64>,
    qddot: DVector<f64>,
}

/// Iterated least-squares retraction `q ← q − A⁺Φ(q)` onto the active constraints.
pub fn project_to_constraints(
    q_raw: &DVector<f64>,
    system: &dyn MechanicalSystem,
    active: &ConstraintSet,
    tol: f64,
    rank_tol: f64,
) -> Result<DVector<f64>> {
    const MAX_ITER: usize = 20;
    let mut q = q_raw.clone();
    let zero = DVector::zeros(q.len());
    let residual = |q: &DVector<f64>| {
        residual_at(system, active, q)
            .ok_or_else(|| Error::InvalidParameter(format!("{} has no position residual", system.name())))
    };
    for iter in 0..MAX_ITER {
        let phi = residual(&q)?;
        let norm = phi.norm();
        if norm <= tol {
            return Ok(q);
        }
        let a = jacobian_at(system, active, &q, &zero)?.a;
        let (a_pinv, _) = pseudo_inverse(&a, rank_tol)?;
        let dq = a_pinv * phi;
        if !(dq.norm() > 0.0) || !dq.iter().all(|x| x.is_finite()) {
            return Err(Error::InconsistentInitialState { residual: norm, iterations: iter });
        }
        q -= dq;
    }
    let norm = residual(&q)?.norm();
    if norm <= tol {
        Ok(q)
    } else {
        Err(Error::InconsistentInitialState { residual: norm, iterations: MAX_ITER })
    }
}

/// Integration state for one scenario run.
pub struct Simulation<'a> {
    scenario: &'a Scenario,
    active: ConstraintSet,
    mu: f64,
    regulator: Option<Regulator>,
    next_event: usize,
    steps_taken: usize,
    events: Vec<RankEvent>,
}

impl<'a> Simulation<'a> {
    /// Validates the scenario, applies events scheduled at or before `t₀`, picks `μ`
    /// and projects the initial velocity onto `𝒩(A)`.
    pub fn new(scenario: &'a Scenario) -> Result<(Self, GeneralizedState)> {
        scenario.validate()?;
        let mut sim = Self {
            scenario,
            active: scenario.initial_constraints.clone(),
            mu: 1.0,
            regulator: None,
            next_event: 0,
            steps_taken: 0,
            events: Vec::new(),
        };
        let mut state = scenario.initial.clone();
        sim.mu = sim.select_mu(&state)?;
        while sim.next_event < scenario.events.len() && scenario.events[sim.next_event].time <= state.t {
            state = sim.apply_event(state, 0)?;
        }
        let proj = sim.projectors(&state.q, &state.qdot)?;
        let projected = &proj.p * &state.qdot;
        let removed = (&projected - &state.qdot).norm();
        if removed > 1e-8 * (1.0 + state.qdot.norm()) {
            warn!("initial velocity had an inadmissible component of norm {removed:e}; projected out");
        }
        state.qdot = projected;

        if let Controller::Regulate { gains, target } = &scenario.controller {
            let typical = state.qdot.norm();
            sim.regulator = Some(Regulator::new(gains.clone(), target.clone(), &proj, &state.qdot, typical)?);
        }
        Ok((sim, state))
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn active(&self) -> &ConstraintSet {
        &self.active
    }

    fn system(&self) -> &dyn MechanicalSystem {
        self.scenario.system.as_ref()
    }

    fn projectors(&self, q: &DVector<f64>, qdot: &DVector<f64>) -> Result<ProjectorBundle> {
        build_projectors(&jacobian_at(self.system(), &self.active, q, qdot)?, self.scenario.rank_tol)
    }

    fn select_mu(&self, state: &GeneralizedState) -> Result<f64> {
        let plant = plant_at(self.system(), &state.q, &state.qdot);
        let proj = self.projectors(&state.q, &state.qdot)?;
        let sel = model::optimal_mu(&plant, &proj, self.scenario.mu_policy, self.scenario.rank_tol)?;
        if let Some(w) = &sel.warning {
            warn!("t = {}: {w}", state.t);
        }
        debug!("virtual mass μ = {} (interval {:?})", sel.mu, sel.interval);
        Ok(sel.mu)
    }

    fn open_loop_force(&self, t: f64) -> DVector<f64> {
        let n = self.system().dof();
        match &self.scenario.controller {
            Controller::OpenLoop(schedule) => schedule
                .iter()
                .rev()
                .find(|(start, _)| *start <= t)
                .map(|(_, f)| f.clone())
                .unwrap_or_else(|| DVector::zeros(n)),
            _ => DVector::zeros(n),
        }
    }

    fn evaluate(&self, t: f64, q: &DVector<f64>, qdot: &DVector<f64>) -> Result<Evaluation> {
        let system = self.system();
        let plant = plant_at(system, q, qdot);
        let proj = self.projectors(q, qdot)?;
        let model = model::assemble(&plant, &proj, self.mu)?;
        let (f, u) = match &self.regulator {
            Some(reg) => {
                let out = reg.evaluate(q, qdot, &plant, &proj, self.scenario.rank_tol)?;
                (out.f, out.u)
            }
            None => {
                let f = self.open_loop_force(t);
                let (b_pinv, _) = pseudo_inverse(&plant.input_map, self.scenario.rank_tol)?;
                let u = b_pinv * &f;
                (f, u)
            }
        };
        let qddot = forces::acceleration(&plant, &proj, &model, &f, qdot)?;
        Ok(Evaluation { plant, proj, model, f, u, qddot })
    }

    fn divergence(&self, last_good: &GeneralizedState, reason: impl Into<String>) -> Error {
        Error::Divergence {
            step: self.steps_taken,
            t: last_good.t,
            reason: reason.into(),
            last_good: last_good.flatten(),
        }
    }

    fn derivative(&self, t: f64, q: &DVector<f64>, qdot: &DVector<f64>, last_good: &GeneralizedState) -> Result<DVector<f64>> {
        let eval = self.evaluate(t, q, qdot)?;
        if !eval.qddot.iter().all(|x| x.is_finite()) {
            return Err(self.divergence(last_good, "non-finite acceleration"));
        }
        Ok(eval.qddot)
    }

    /// One RK4 update over `h` with a fixed constraint set, then velocity projection.
    fn rk4(&self, state: &GeneralizedState, h: f64) -> Result<GeneralizedState> {
        let (t, q, v) = (state.t, &state.q, &state.qdot);
        let a1 = self.derivative(t, q, v, state)?;
        let (q2, v2) = (q + v * (0.5 * h), v + &a1 * (0.5 * h));
        let a2 = self.derivative(t + 0.5 * h, &q2, &v2, state)?;
        let (q3, v3) = (q + &v2 * (0.5 * h), v + &a2 * (0.5 * h));
        let a3 = self.derivative(t + 0.5 * h, &q3, &v3, state)?;
        let (q4, v4) = (q + &v3 * h, v + &a3 * h);
        let a4 = self.derivative(t + h, &q4, &v4, state)?;

        let q_new = q + (v + &v2 * 2.0 + &v3 * 2.0 + &v4) * (h / 6.0);
        let v_new = v + (&a1 + &a2 * 2.0 + &a3 * 2.0 + &a4) * (h / 6.0);
        let mut next = GeneralizedState::new(t + h, q_new, v_new);
        if !next.is_finite() {
            return Err(self.divergence(state, "non-finite state after update"));
        }
        let proj = self.projectors(&next.q, &next.qdot)?;
        next.qdot = &proj.p * &next.qdot;
        Ok(next)
    }

    fn total_energy(&self, state: &GeneralizedState) -> f64 {
        let m = self.system().mass_matrix(&state.q);
        0.5 * state.qdot.dot(&(m * &state.qdot)) + self.system().potential_energy(&state.q)
    }

    fn apply_event(&mut self, mut state: GeneralizedState, step: usize) -> Result<GeneralizedState> {
        let ev = &self.scenario.events[self.next_event];
        self.next_event += 1;
        let rank_before = self.projectors(&state.q, &state.qdot)?.rank;
        let energy_before = self.total_energy(&state);
        for &i in &ev.activate {
            self.active.set(i, true);
        }
        for &i in &ev.deactivate {
            self.active.set(i, false);
        }
        // inelastic capture: keep q, drop the velocity component along the new 𝒩⊥
        let proj = self.projectors(&state.q, &state.qdot)?;
        state.qdot = &proj.p * &state.qdot;
        let rank_after = proj.rank;
        if let MuPolicy::Fixed(_) = self.scenario.mu_policy {
        } else {
            self.mu = self.select_mu(&state)?;
        }
        let energy_drop = energy_before - self.total_energy(&state);
        info!(
            "t = {}: topology event, rank {rank_before} → {rank_after}, energy drop {energy_drop:e}",
            state.t
        );
        self.events.push(RankEvent {
            t: state.t,
            step,
            cause: RankEventCause::Topology,
            rank_before,
            rank_after,
            energy_drop,
            mu: self.mu,
        });
        Ok(state)
    }

    /// Advances by one step of size `dt`, splitting at any event inside `(t, t + dt]`.
    pub fn step(&mut self, state: &GeneralizedState) -> Result<GeneralizedState> {
        let dt = self.scenario.dt;
        let t_end = state.t + dt;
        let snap = 1e-9 * dt;
        if let Some(reg) = self.regulator.as_mut() {
            reg.begin_step(&state.qdot);
        }
        let rank_before = self.projectors(&state.q, &state.qdot)?.rank;
        let events_before = self.events.len();

        let mut current = state.clone();
        while self.next_event < self.scenario.events.len() {
            let t_ev = self.scenario.events[self.next_event].time;
            if t_ev > t_end + snap {
                break;
            }
            let h = t_ev - current.t;
            if h > snap {
                current = self.rk4(&current, h)?;
            }
            current.t = t_ev;
            current = self.apply_event(current, self.steps_taken + 1)?;
        }
        let h = t_end - current.t;
        if h > snap {
            current = self.rk4(&current, h)?;
        }
        current.t = t_end;

        self.steps_taken += 1;
        if let Some(every) = self.scenario.retract_every {
            if every > 0 && self.steps_taken % every == 0 {
                current.q = project_to_constraints(
                    &current.q,
                    self.system(),
                    &self.active,
                    1e-12,
                    self.scenario.rank_tol,
                )?;
                let proj = self.projectors(&current.q, &current.qdot)?;
                current.qdot = &proj.p * &current.qdot;
            }
        }

        let rank_after = self.projectors(&current.q, &current.qdot)?.rank;
        if rank_after != rank_before && self.events.len() == events_before {
            info!("t = {}: rank of A changed {rank_before} → {rank_after}", current.t);
            self.events.push(RankEvent {
                t: current.t,
                step: self.steps_taken,
                cause: RankEventCause::Configuration,
                rank_before,
                rank_after,
                energy_drop: 0.0,
                mu: self.mu,
            });
        }
        Ok(current)
    }

    /// Record for the trace at `state`.
    pub fn record(&self, step: usize, state: &GeneralizedState) -> Result<TraceRecord> {
        let eval = self.evaluate(state.t, &state.q, &state.qdot)?;
        let fc = forces::constraint_force(&eval.plant, &eval.proj, &eval.model, &eval.f, &state.qdot)?;
        let jac = jacobian_at(self.system(), &self.active, &state.q, &state.qdot)?;
        let kinetic = 0.5 * state.qdot.dot(&(&eval.plant.mass * &state.qdot));
        let potential = self.system().potential_energy(&state.q);
        let lyapunov = self.regulator.as_ref().map(|r| r.lyapunov(&state.q, &state.qdot, &eval.model));
        let drift_position = residual_at(self.system(), &self.active, &state.q).map(|p| p.norm());
        Ok(TraceRecord {
            step,
            t: state.t,
            q: state.q.iter().copied().collect(),
            qdot: state.qdot.iter().copied().collect(),
            qddot: eval.qddot.iter().copied().collect(),
            f: eval.f.iter().copied().collect(),
            u: eval.u.iter().copied().collect(),
            fc: fc.iter().copied().collect(),
            kinetic,
            potential,
            total: kinetic + potential,
            lyapunov,
            rank: eval.proj.rank,
            cond: eval.model.cond,
            mu: self.mu,
            drift_velocity: (&jac.a * &state.qdot).norm(),
            drift_position,
        })
    }

    pub fn into_events(self) -> Vec<RankEvent> {
        self.events
    }
}

/// Runs a scenario to its horizon and returns `horizon/dt + 1` records.
pub fn run(scenario: &Scenario) -> Result<SimulationTrace> {
    let (mut sim, mut state) = Simulation::new(scenario)?;
    let steps = scenario.num_steps();
    let mut records = Vec::with_capacity(steps + 1);
    records.push(sim.record(0, &state).map_err(|e| e.at_step(0))?);
    for k in 1..=steps {
        state = sim.step(&state).map_err(|e| e.at_step(k))?;
        // keep the time grid exact
        state.t = scenario.initial.t + k as f64 * scenario.dt;
        records.push(sim.record(k, &state).map_err(|e| e.at_step(k))?);
    }
    Ok(SimulationTrace {
        system: scenario.system.name().to_string(),
        dof: scenario.system.dof(),
        inputs: scenario.system.num_inputs(),
        records,
        events: sim.into_events(),
    })
}
