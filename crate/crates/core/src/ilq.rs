//! Iterative linear-quadratic-Laplace (LQL) solver for nonlinear KL games.
//!
//! Each iteration linearizes the dynamics, quadraticizes the costs and
//! Gaussian-approximates the references around the nominal trajectory, solves the
//! resulting KL-LQG game in deviation coordinates, and moves the nominal with a
//! backtracking line search on the social cost.

use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::cost::{GameCost, QuadraticStageCost};
use crate::dynamics::{Dynamics, LinearGameStage};
use crate::error::{dim_err, KlError, Result};
use crate::game::{make_trajectory, GameDims, JointControl, JointState, Trajectory};
use crate::klqg::{solve_game_staged, AffineGaussianPolicy, KLWeights, KlqgSolution, PolicyStage, Reference, ReferenceStage};
use crate::par;
use crate::reference::{gaussian_kl, laplace_at, FeedbackGaussianRef, GaussianRef, StochasticPolicy};

/// Relative social-cost increase still treated as "no increase".
const COST_ROUNDING: f64 = 1e-12;

/// Stopping and line-search settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LQLConfig {
    pub max_iterations: usize,
    /// Largest per-entry state change below which two nominals count as equal.
    pub trajectory_tolerance: f64,
    /// Relative social-cost change below which the solve counts as converged.
    pub cost_tolerance: f64,
    pub linesearch_max_halvings: usize,
    pub initial_step: f64,
    /// Whether the λ-weighted KL terms enter the line-search objective.
    pub include_kl_in_social_cost: bool,
    /// Run all `max_iterations` even when converged or stalled (benchmarking).
    pub fixed_iterations: bool,
}

impl Default for LQLConfig {
    fn default() -> Self {
        LQLConfig {
            max_iterations: 100,
            trajectory_tolerance: 1e-3,
            cost_tolerance: 1e-4,
            linesearch_max_halvings: 15,
            initial_step: 1.0,
            include_kl_in_social_cost: true,
            fixed_iterations: false,
        }
    }
}

impl LQLConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(KlError::Precondition("max_iterations must be >= 1".into()));
        }
        if !(self.trajectory_tolerance >= 0.0 && self.cost_tolerance >= 0.0) {
            return Err(KlError::Precondition("tolerances must be >= 0".into()));
        }
        if !(self.initial_step > 0.0 && self.initial_step <= 1.0) {
            return Err(KlError::Precondition("initial_step must be in (0, 1]".into()));
        }
        Ok(())
    }

    /// Runs exactly `iterations` backward passes with the given line-search budget.
    pub fn fixed_iterations(iterations: usize, halvings: usize) -> Self {
        LQLConfig {
            max_iterations: iterations,
            trajectory_tolerance: 0.0,
            cost_tolerance: 0.0,
            linesearch_max_halvings: halvings,
            fixed_iterations: true,
            ..LQLConfig::default()
        }
    }
}

/// A player's reference policy in a nonlinear problem.
#[derive(Clone)]
pub enum PlayerReference {
    /// No reference (the player must have `λ = 0`).
    Absent,
    Gaussian(GaussianRef),
    Feedback(FeedbackGaussianRef),
    /// Arbitrary density, Laplace-approximated around the nominal each iteration.
    Policy(Arc<dyn StochasticPolicy>),
}

impl std::fmt::Debug for PlayerReference {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PlayerReference::Absent => write!(f, "Absent"),
            PlayerReference::Gaussian(g) => f.debug_tuple("Gaussian").field(g).finish(),
            PlayerReference::Feedback(g) => f.debug_tuple("Feedback").field(g).finish(),
            PlayerReference::Policy(_) => write!(f, "Policy(..)"),
        }
    }
}

impl From<Reference> for PlayerReference {
    fn from(r: Reference) -> Self {
        match r {
            Reference::Open(g) => PlayerReference::Gaussian(g),
            Reference::Feedback(f) => PlayerReference::Feedback(f),
            Reference::Absent => PlayerReference::Absent,
        }
    }
}

impl PlayerReference {
    /// Reference at step `t` in deviation coordinates around `(x̄_t, ū_t)`.
    fn deviation_stage(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<ReferenceStage> {
        Ok(match self {
            PlayerReference::Absent => ReferenceStage::Absent,
            PlayerReference::Gaussian(g) => ReferenceStage::Open {
                mean: g.mean(t) - u,
                cov: g.cov(t).clone(),
            },
            PlayerReference::Feedback(f) => ReferenceStage::Feedback {
                gain: f.gain(t).clone(),
                offset: f.gain(t) * x + f.offset(t) + u,
                cov: f.cov(t).clone(),
            },
            PlayerReference::Policy(p) => {
                let (mean, cov) = laplace_at(p.as_ref(), x, t, u)?;
                ReferenceStage::Open { mean: mean - u, cov }
            }
        })
    }

    /// Regularization penalty of playing `u` at `x`: the Gaussian KL of a
    /// reference-shaped density centred at `u`, or the negative log-density for
    /// general policies. Depends on the trajectory only.
    pub fn penalty(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        match self {
            PlayerReference::Absent => 0.0,
            PlayerReference::Gaussian(g) => gaussian_kl(u, g.cov(t), g.mean(t), g.cov(t)).unwrap_or(f64::INFINITY),
            PlayerReference::Feedback(f) => gaussian_kl(u, f.cov(t), &f.mean_at(x, t), f.cov(t)).unwrap_or(f64::INFINITY),
            PlayerReference::Policy(p) => -p.log_density(u, x, t),
        }
    }
}

/// A nonlinear KL game: dynamics, per-player costs, references and weights.
#[derive(Clone)]
pub struct Problem {
    pub dynamics: Arc<dyn Dynamics>,
    pub cost: Arc<dyn GameCost>,
    pub refs: Vec<PlayerReference>,
    pub lambda: KLWeights,
    pub horizon: usize,
}

impl std::fmt::Debug for Problem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Problem")
            .field("state_dim", &self.dynamics.state_dim())
            .field("control_dims", &self.dynamics.control_dims())
            .field("refs", &self.refs)
            .field("lambda", &self.lambda)
            .field("horizon", &self.horizon)
            .finish()
    }
}

impl Problem {
    pub fn new(
        dynamics: Arc<dyn Dynamics>,
        cost: Arc<dyn GameCost>,
        refs: Vec<PlayerReference>,
        lambda: KLWeights,
        horizon: usize,
    ) -> Result<Self> {
        let p = Problem {
            dynamics,
            cost,
            refs,
            lambda,
            horizon,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn n_players(&self) -> usize {
        self.dynamics.control_dims().len()
    }

    pub fn dims(&self) -> Result<GameDims> {
        GameDims::new(
            self.dynamics.state_dim(),
            self.dynamics.control_dims().to_vec(),
            self.horizon,
            self.dynamics.dt(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.dims()?;
        let np = self.n_players();
        if self.cost.n_players() != np || self.refs.len() != np || self.lambda.len() != np {
            return dim_err(format!(
                "dynamics has {np} players but cost/refs/lambda have {}/{}/{}",
                self.cost.n_players(),
                self.refs.len(),
                self.lambda.len()
            ));
        }
        for (i, r) in self.refs.iter().enumerate() {
            if self.lambda.get(i) > 0.0 && matches!(r, PlayerReference::Absent) {
                return Err(KlError::Precondition(format!("player {i} has lambda > 0 but no reference")));
            }
        }
        Ok(())
    }

    /// Same game with every player's reference and weight replaced.
    pub fn with_refs(&self, refs: Vec<PlayerReference>, lambda: KLWeights) -> Result<Self> {
        Problem::new(self.dynamics.clone(), self.cost.clone(), refs, lambda, self.horizon)
    }

    pub fn with_horizon(&self, horizon: usize) -> Self {
        Problem {
            horizon,
            ..self.clone()
        }
    }
}

/// Stage cost plus weighted regularization penalties, summed over players and time.
pub fn social_cost(problem: &Problem, traj: &Trajectory, include_kl: bool) -> f64 {
    let mut total = 0.0;
    for t in 0..traj.horizon() {
        let (x, u) = (traj.state(t), traj.control(t));
        total += problem.cost.total(x, u);
        if include_kl {
            for (i, r) in problem.refs.iter().enumerate() {
                let l = problem.lambda.get(i);
                if l > 0.0 {
                    total += l * r.penalty(t, &x.0, &u.per_player[i]);
                }
            }
        }
    }
    if total.is_finite() {
        total
    } else {
        f64::INFINITY
    }
}

/// The local KL-LQG game built around a nominal, and its equilibrium.
#[derive(Debug, Clone)]
pub struct BackwardPass {
    pub stages: Vec<LinearGameStage>,
    pub costs: Vec<Vec<QuadraticStageCost>>,
    pub refs: Vec<Vec<ReferenceStage>>,
    /// Equilibrium in deviation coordinates `δu = -K δx - κ`.
    pub solution: KlqgSolution,
}

/// Local model at `(x̄_t, ū_t)`: linearized dynamics with zero drift (the nominal
/// is a rollout), quadraticized costs and deviation-coordinate references.
pub(crate) fn local_model(
    problem: &Problem,
    t: usize,
    x: &JointState,
    u: &JointControl,
) -> Result<(LinearGameStage, Vec<QuadraticStageCost>, Vec<ReferenceStage>)> {
    let mut stage = problem.dynamics.linearize(x, u)?;
    stage.drift.fill(0.0);
    let np = problem.n_players();
    let costs = (0..np).map(|i| problem.cost.quadraticize(i, x, u)).collect::<Result<Vec<_>>>()?;
    let refs = (0..np)
        .map(|i| problem.refs[i].deviation_stage(t, &x.0, &u.per_player[i]))
        .collect::<Result<Vec<_>>>()?;
    Ok((stage, costs, refs))
}

/// Builds the KL-LQG approximation around `nominal` and solves it.
pub fn backward_pass(problem: &Problem, nominal: &Trajectory) -> Result<BackwardPass> {
    if nominal.horizon() != problem.horizon {
        return dim_err("nominal horizon differs from the problem horizon");
    }
    let models = par::map_indices(problem.horizon, |t| local_model(problem, t, nominal.state(t), nominal.control(t)));
    let mut stages = Vec::with_capacity(problem.horizon);
    let mut costs = Vec::with_capacity(problem.horizon);
    let mut refs = Vec::with_capacity(problem.horizon);
    for (t, m) in models.into_iter().enumerate() {
        let (s, c, r) = m.map_err(|e| e.with_context(format!("building local model at t={t}")))?;
        stages.push(s);
        costs.push(c);
        refs.push(r);
    }
    let solution = solve_game_staged(&stages, &costs, &refs, &problem.lambda)?;
    Ok(BackwardPass {
        stages,
        costs,
        refs,
        solution,
    })
}

/// Rolls the nonlinear dynamics forward under `u = ū + ε(-K(x - x̄) - κ)`.
pub fn forward_pass(problem: &Problem, nominal: &Trajectory, policies: &[AffineGaussianPolicy], eps: f64) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(nominal.horizon() + 1);
    let mut controls = Vec::with_capacity(nominal.horizon());
    states.push(nominal.initial_state().clone());
    for t in 0..nominal.horizon() {
        let x = &states[t];
        let dx = &x.0 - &nominal.state(t).0;
        let per_player = policies
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let s = &p.stages[t];
                &nominal.control(t).per_player[i] - (&s.gain * &dx + &s.offset) * eps
            })
            .collect();
        let u = JointControl::new(per_player)?;
        let next = problem.dynamics.step(x, &u)?;
        controls.push(u);
        states.push(next);
    }
    Trajectory::new(states, controls)
}

/// Converts deviation-coordinate policies `δu = -K δx - κ` around `nominal` into
/// absolute policies `u = -K x - κ_abs`.
pub fn to_absolute(policies: &[AffineGaussianPolicy], nominal: &Trajectory) -> Vec<AffineGaussianPolicy> {
    policies
        .iter()
        .enumerate()
        .map(|(i, p)| AffineGaussianPolicy {
            stages: p
                .stages
                .iter()
                .enumerate()
                .map(|(t, s)| PolicyStage {
                    gain: s.gain.clone(),
                    offset: &s.offset - &s.gain * &nominal.state(t).0 - &nominal.control(t).per_player[i],
                    cov: s.cov.clone(),
                })
                .collect(),
            deterministic: p.deterministic,
        })
        .collect()
}

/// One outer iteration of a solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub social_cost: f64,
    pub step: Option<f64>,
    pub halvings: usize,
    pub trajectory_change: f64,
}

/// Anything the LQL driver can iterate: a single nominal or a scenario tree.
pub(crate) trait Plan: Clone {
    type Policy;
    fn backward(&self) -> Result<Self::Policy>;
    fn forward(&self, policy: &Self::Policy, eps: f64) -> Result<Self>;
    fn social_cost(&self, include_kl: bool) -> f64;
    fn distance(&self, other: &Self) -> f64;
}

pub(crate) struct DriverOutcome<P: Plan> {
    pub plan: P,
    pub policy: P::Policy,
    pub iterations: usize,
    pub converged: bool,
    pub history: Vec<f64>,
    pub trace: Vec<IterationRecord>,
}

/// Alternates backward passes and line-searched forward passes.
///
/// A step is accepted when it does not increase the social cost, or when it moves
/// the plan by less than the trajectory tolerance. The solve has converged when
/// an accepted step both lowers the cost and barely moves the plan, when the
/// relative cost change falls below the cost tolerance, or when no step size
/// improves the cost.
pub(crate) fn run_lql<P: Plan>(initial: P, config: &LQLConfig) -> Result<DriverOutcome<P>> {
    config.validate()?;
    let mut plan = initial;
    let include_kl = config.include_kl_in_social_cost;
    let mut current = plan.social_cost(include_kl);
    let mut history = vec![current];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut last_policy: Option<P::Policy> = None;
    let mut iterations = 0;
    for iteration in 0..config.max_iterations {
        iterations += 1;
        let policy = plan.backward().map_err(|e| e.with_context(format!("backward pass, iteration {iteration}")))?;
        // rounding noise must not count as a cost increase
        let slack = COST_ROUNDING * current.abs().max(1.0);
        let mut eps = config.initial_step;
        let mut accepted = None;
        let mut numerical_failures = 0;
        let mut last_change = 0.0;
        let mut halvings = 0;
        for h in 0..=config.linesearch_max_halvings {
            halvings = h;
            match plan.forward(&policy, eps) {
                Ok(cand) => {
                    let cost = cand.social_cost(include_kl);
                    let change = cand.distance(&plan);
                    last_change = change;
                    if cost.is_finite() && (cost <= current + slack || change < config.trajectory_tolerance) {
                        accepted = Some((cand, cost, change));
                        break;
                    }
                }
                Err(e) if e.is_numerical() => numerical_failures += 1,
                Err(e) => return Err(e.with_context(format!("forward pass, iteration {iteration}"))),
            }
            eps *= 0.5;
        }
        match accepted {
            Some((cand, cost, change)) => {
                let rel = (current - cost).abs() / current.abs().max(1e-12);
                let done = (cost <= current + slack && change < config.trajectory_tolerance) || rel < config.cost_tolerance;
                trace.push(IterationRecord {
                    iteration,
                    social_cost: cost,
                    step: Some(eps),
                    halvings,
                    trajectory_change: change,
                });
                plan = cand;
                history.push(cost);
                current = cost;
                last_policy = None;
                converged = done;
                if done && !config.fixed_iterations {
                    break;
                }
            }
            None => {
                trace.push(IterationRecord {
                    iteration,
                    social_cost: current,
                    step: None,
                    halvings,
                    trajectory_change: last_change,
                });
                if numerical_failures == config.linesearch_max_halvings + 1 {
                    return Err(KlError::LineSearchFailure {
                        iteration,
                        reason: "every trial step produced a non-finite rollout".into(),
                    });
                }
                last_policy = Some(policy);
                converged = true;
                if !config.fixed_iterations {
                    break;
                }
            }
        }
    }
    let policy = match last_policy {
        Some(p) => p,
        None => plan.backward().map_err(|e| e.with_context("final backward pass"))?,
    };
    Ok(DriverOutcome {
        plan,
        policy,
        iterations,
        converged,
        history,
        trace,
    })
}

#[derive(Clone)]
struct ChainPlan<'a> {
    problem: &'a Problem,
    nominal: Trajectory,
}

impl Plan for ChainPlan<'_> {
    type Policy = BackwardPass;

    fn backward(&self) -> Result<BackwardPass> {
        backward_pass(self.problem, &self.nominal)
    }

    fn forward(&self, policy: &BackwardPass, eps: f64) -> Result<Self> {
        Ok(ChainPlan {
            problem: self.problem,
            nominal: forward_pass(self.problem, &self.nominal, &policy.solution.policies, eps)?,
        })
    }

    fn social_cost(&self, include_kl: bool) -> f64 {
        social_cost(self.problem, &self.nominal, include_kl)
    }

    fn distance(&self, other: &Self) -> f64 {
        self.nominal.max_state_deviation(&other.nominal)
    }
}

/// Result of an LQL solve.
#[derive(Debug, Clone)]
pub struct LQLSolution {
    /// Equilibrium policies in absolute coordinates, `u = -K x - κ`.
    pub policies: Vec<AffineGaussianPolicy>,
    /// The same policies in deviation coordinates around `nominal`.
    pub deviation_policies: Vec<AffineGaussianPolicy>,
    pub nominal: Trajectory,
    pub iterations_used: usize,
    pub converged: bool,
    /// Social cost of the initial nominal followed by every accepted step.
    pub social_cost_history: Vec<f64>,
    pub trace: Vec<IterationRecord>,
}

/// Solves `problem` from `x0`, starting from `initial_controls` (zeros when `None`).
pub fn solve(problem: &Problem, x0: &JointState, initial_controls: Option<&[JointControl]>, config: &LQLConfig) -> Result<LQLSolution> {
    problem.validate()?;
    let dims = problem.dims()?;
    let controls = match initial_controls {
        Some(c) => c.to_vec(),
        None => vec![JointControl::zeros(&dims.control_dims); dims.horizon],
    };
    let nominal = make_trajectory(&dims, x0, &controls, problem.dynamics.as_ref())?;
    let out = run_lql(ChainPlan { problem, nominal }, config)?;
    let nominal = out.plan.nominal;
    let deviation_policies = out.policy.solution.policies;
    Ok(LQLSolution {
        policies: to_absolute(&deviation_policies, &nominal),
        deviation_policies,
        nominal,
        iterations_used: out.iterations,
        converged: out.converged,
        social_cost_history: out.history,
        trace: out.trace,
    })
}
