//! Receding-horizon simulation of the tollbooth game, Monte Carlo batches and
//! trial metrics.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{GameCost, TollboothCost, TollboothPlayer};
use crate::dynamics::{Dynamics, KinematicBicycle};
use crate::error::{dim_err, KlError, Result};
use crate::game::{JointControl, JointState};
use crate::ilq::{self, LQLConfig, PlayerReference, Problem};
use crate::klqg::KLWeights;
use crate::par;
use crate::reference::{FeedbackGaussianRef, GMMRef, GaussianRef, RefComponent};
use crate::scenario::{self, GMMPolicy, MMProblem};

pub const SCHEMA_VERSION: u32 = 1;

/// Solver family used to plan each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// No regularization (`λ = 0`), deterministic.
    Ilqgames,
    /// Every player regularized toward a very wide zero-mean Gaussian.
    Maxent,
    /// Configured references, Laplace-approximated when multi-modal.
    Klgame,
    /// Configured references on a scenario tree.
    MmKlgame,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ilqgames, Method::Maxent, Method::Klgame, Method::MmKlgame];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ilqgames => "ilqgames",
            Method::Maxent => "maxent",
            Method::Klgame => "klgame",
            Method::MmKlgame => "mm-klgame",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = KlError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| KlError::Precondition(format!("unknown method `{s}` (expected ilqgames, maxent, klgame or mm-klgame)")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Whether executed actions are sampled from the equilibrium policy or set to its mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    #[default]
    Sampled,
    Mean,
}

/// One Gaussian reference component, constant over the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ComponentSpec {
    Gaussian {
        mean: Vec<f64>,
        cov: Vec<Vec<f64>>,
    },
    /// Mean `-K x - κ`.
    Feedback {
        gain: Vec<Vec<f64>>,
        offset: Vec<f64>,
        cov: Vec<Vec<f64>>,
    },
}

/// A player's reference policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ReferenceSpec {
    None,
    Gaussian {
        mean: Vec<f64>,
        cov: Vec<Vec<f64>>,
    },
    Feedback {
        gain: Vec<Vec<f64>>,
        offset: Vec<f64>,
        cov: Vec<Vec<f64>>,
    },
    Gmm {
        components: Vec<ComponentSpec>,
        weights: Vec<f64>,
    },
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || rows.iter().any(|row| row.len() != c) {
        return dim_err(format!("{what} must be a non-empty rectangular matrix"));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

impl ComponentSpec {
    fn build(&self, horizon: usize) -> Result<RefComponent> {
        Ok(match self {
            ComponentSpec::Gaussian { mean, cov } => RefComponent::Open(GaussianRef::constant(
                DVector::from_column_slice(mean),
                matrix(cov, "reference cov")?,
                horizon,
            )?),
            ComponentSpec::Feedback { gain, offset, cov } => RefComponent::Feedback(FeedbackGaussianRef::constant(
                matrix(gain, "reference gain")?,
                DVector::from_column_slice(offset),
                matrix(cov, "reference cov")?,
                horizon,
            )?),
        })
    }
}

impl ReferenceSpec {
    /// The reference as a mixture (`None` when absent).
    pub fn build(&self, horizon: usize) -> Result<Option<GMMRef>> {
        Ok(match self {
            ReferenceSpec::None => None,
            ReferenceSpec::Gaussian { mean, cov } => Some(GMMRef::single(
                ComponentSpec::Gaussian {
                    mean: mean.clone(),
                    cov: cov.clone(),
                }
                .build(horizon)?,
            )),
            ReferenceSpec::Feedback { gain, offset, cov } => Some(GMMRef::single(
                ComponentSpec::Feedback {
                    gain: gain.clone(),
                    offset: offset.clone(),
                    cov: cov.clone(),
                }
                .build(horizon)?,
            )),
            ReferenceSpec::Gmm { components, weights } => Some(GMMRef::constant(
                components.iter().map(|c| c.build(horizon)).collect::<Result<_>>()?,
                weights.clone(),
            )?),
        })
    }
}

/// Wide-Gaussian regularization used by the maximum-entropy baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaxEntSpec {
    pub lambda: f64,
    /// Diagonal variance of the zero-mean reference.
    pub variance: f64,
}

/// Everything needed to run one tollbooth trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub dt: f64,
    /// Per-agent `[x, y, heading, speed]`.
    pub initial_state: Vec<[f64; 4]>,
    pub cost: TollboothCost,
    pub references: Vec<ReferenceSpec>,
    pub lambda: Vec<f64>,
    pub maxent: MaxEntSpec,
    pub planning_horizon: usize,
    pub sim_length: usize,
    pub replan_interval: usize,
    #[serde(default)]
    pub execution: Execution,
    /// Modes kept at the scenario-tree root.
    #[serde(default = "default_max_modes")]
    pub max_modes: usize,
    #[serde(default)]
    pub solver: LQLConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_max_modes() -> usize {
    2
}

impl ScenarioSpec {
    /// Two cars approaching a two-lane tollbooth. Player 1 starts in Lane 1 (upper);
    /// Player 2 starts 8 m ahead in Lane 2 and strongly prefers to merge into Lane 1.
    /// Player 1's reference is a constant right turn toward Lane 2.
    pub fn tollbooth() -> Self {
        let lane = 1.85;
        let player = |preferred_lane, preference_weight| TollboothPlayer {
            target_speed: 10.0,
            preferred_lane,
            preference_weight,
            coordination: true,
        };
        ScenarioSpec {
            dt: 0.1,
            initial_state: vec![[0.0, lane, 0.0, 10.0], [8.0, -lane, 0.0, 10.0]],
            cost: TollboothCost {
                lane_centers: vec![lane, -lane],
                lane_width: 3.7,
                half_width: 3.7,
                lane_weight: 4.0,
                lane_temperature: 1.0,
                coordination_weight: 10.0,
                coordination_sigma: 2.0,
                collision_weight: 50.0,
                collision_radius: 2.0,
                boundary_weight: 100.0,
                boundary_margin: 0.9,
                speed_weight: 1.0,
                heading_weight: 4.0,
                control_weights: vec![1.0, 1.0],
                players: vec![player(None, 0.0), player(Some(0), 20.0)],
            },
            references: vec![
                ReferenceSpec::Gaussian {
                    mean: vec![0.0, -0.4],
                    cov: vec![vec![0.05, 0.0], vec![0.0, 0.02]],
                },
                ReferenceSpec::None,
            ],
            lambda: vec![1.0, 0.0],
            maxent: MaxEntSpec {
                lambda: 0.5,
                variance: 1e6,
            },
            planning_horizon: 20,
            sim_length: 45,
            replan_interval: 1,
            execution: Execution::Sampled,
            max_modes: 2,
            solver: LQLConfig::default(),
            seed: 0,
        }
    }

    /// The tollbooth with a bimodal Player 1 reference: keep the lane, or a
    /// lane-change controller steering toward the Lane 2 center.
    pub fn tollbooth_two_mode() -> Self {
        let mut spec = Self::tollbooth();
        let (ky, kh) = (0.5, 1.0);
        let mut gain = vec![vec![0.0; 8]; 2];
        gain[1][1] = ky;
        gain[1][2] = kh;
        let cov = vec![vec![0.05, 0.0], vec![0.0, 0.02]];
        spec.references[0] = ReferenceSpec::Gmm {
            components: vec![
                ComponentSpec::Gaussian {
                    mean: vec![0.0, 0.0],
                    cov: cov.clone(),
                },
                ComponentSpec::Feedback {
                    gain,
                    offset: vec![0.0, -ky * spec.cost.lane_centers[1]],
                    cov,
                },
            ],
            weights: vec![0.5, 0.5],
        };
        spec
    }

    pub fn n_players(&self) -> usize {
        self.initial_state.len()
    }

    pub fn validate(&self) -> Result<()> {
        let np = self.n_players();
        if np == 0 {
            return Err(KlError::Precondition("at least one agent required".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(KlError::Precondition("dt must be > 0".into()));
        }
        if self.cost.players.len() != np || self.references.len() != np || self.lambda.len() != np {
            return dim_err(format!(
                "{np} agents but {} cost players, {} references and {} lambdas",
                self.cost.players.len(),
                self.references.len(),
                self.lambda.len()
            ));
        }
        if self.replan_interval == 0 {
            return Err(KlError::Precondition("replan_interval must be >= 1".into()));
        }
        if self.planning_horizon < self.replan_interval {
            return Err(KlError::Precondition("planning_horizon must be >= replan_interval".into()));
        }
        if self.sim_length == 0 {
            return Err(KlError::Precondition("sim_length must be >= 1".into()));
        }
        if !(self.maxent.lambda >= 0.0 && self.maxent.variance > 0.0) {
            return Err(KlError::Precondition("maxent needs lambda >= 0 and variance > 0".into()));
        }
        if self.max_modes == 0 {
            return Err(KlError::Precondition("max_modes must be >= 1".into()));
        }
        if self.initial_state.iter().flatten().any(|v| !v.is_finite()) {
            return Err(KlError::Precondition("initial_state must be finite".into()));
        }
        self.cost.validate()?;
        self.solver.validate()?;
        KLWeights::new(self.lambda.clone())?;
        for (i, r) in self.references.iter().enumerate() {
            let built = r.build(self.planning_horizon).map_err(|e| e.with_context(format!("reference of player {i}")))?;
            if let Some(g) = &built {
                let m = g.mode(0).cov(0).nrows();
                if m != 2 {
                    return dim_err(format!("reference of player {i} has control dimension {m}, expected 2"));
                }
                if let RefComponent::Feedback(f) = g.mode(0) {
                    if f.state_dim() != 4 * np {
                        return dim_err(format!("feedback reference of player {i} needs {} gain columns", 4 * np));
                    }
                }
            }
            if built.is_none() && self.lambda[i] > 0.0 {
                return Err(KlError::Precondition(format!("player {i} has lambda > 0 but no reference")));
            }
        }
        Ok(())
    }

    pub fn x0(&self) -> JointState {
        JointState(DVector::from_iterator(4 * self.n_players(), self.initial_state.iter().flatten().cloned()))
    }

    pub fn dynamics(&self) -> KinematicBicycle {
        KinematicBicycle::new(self.n_players(), self.dt)
    }
}

/// The per-step planner of one method, built once per trial.
pub enum Planner {
    Chain(Problem),
    Tree(MMProblem),
}

impl Planner {
    pub fn new(spec: &ScenarioSpec, method: Method) -> Result<Self> {
        spec.validate()?;
        let np = spec.n_players();
        let dynamics: Arc<dyn Dynamics> = Arc::new(spec.dynamics());
        let cost: Arc<dyn GameCost> = Arc::new(spec.cost.build()?);
        let horizon = spec.planning_horizon;
        let mixtures = || -> Result<Vec<Option<GMMRef>>> { spec.references.iter().map(|r| r.build(horizon)).collect() };
        Ok(match method {
            Method::Ilqgames => Planner::Chain(Problem::new(dynamics, cost, vec![PlayerReference::Absent; np], KLWeights::zeros(np), horizon)?),
            Method::Maxent => {
                let wide = GaussianRef::uninformative(2, spec.maxent.variance, horizon)?;
                Planner::Chain(Problem::new(
                    dynamics,
                    cost,
                    vec![PlayerReference::Gaussian(wide); np],
                    KLWeights::uniform(np, spec.maxent.lambda)?,
                    horizon,
                )?)
            }
            Method::Klgame => {
                let refs = mixtures()?
                    .into_iter()
                    .map(|g| match g {
                        None => PlayerReference::Absent,
                        Some(g) if g.n_modes() == 1 => match g.mode(0).clone() {
                            RefComponent::Open(r) => PlayerReference::Gaussian(r),
                            RefComponent::Feedback(r) => PlayerReference::Feedback(r),
                        },
                        Some(g) => PlayerReference::Policy(Arc::new(g)),
                    })
                    .collect();
                Planner::Chain(Problem::new(dynamics, cost, refs, KLWeights::new(spec.lambda.clone())?, horizon)?)
            }
            Method::MmKlgame => Planner::Tree(MMProblem::new(
                dynamics,
                cost,
                mixtures()?,
                KLWeights::new(spec.lambda.clone())?,
                horizon,
                spec.max_modes,
            )?),
        })
    }

    /// Solves from `x`, warm-started with `warm`. Returns the root policy of every
    /// player and the planned controls to warm-start the next solve.
    pub fn plan(&self, x: &JointState, warm: Option<&[JointControl]>, config: &LQLConfig) -> Result<(Vec<GMMPolicy>, Vec<JointControl>)> {
        match self {
            Planner::Chain(p) => {
                let sol = ilq::solve(p, x, warm, config)?;
                let root = sol
                    .policies
                    .iter()
                    .map(|pol| GMMPolicy {
                        components: vec![pol.stages[0].clone()],
                        modes: vec![0],
                        weights: vec![1.0],
                    })
                    .collect();
                Ok((root, sol.nominal.controls().to_vec()))
            }
            Planner::Tree(p) => {
                let sol = scenario::solve_mm(p, x, warm, config)?;
                // follow the heaviest root branch for the warm start
                let tree = &sol.tree;
                let mut id = *tree
                    .root()
                    .children
                    .iter()
                    .max_by(|&&a, &&b| tree.nodes[a].weight.total_cmp(&tree.nodes[b].weight).then(b.cmp(&a)))
                    .expect("root has children");
                let mut controls = vec![];
                loop {
                    controls.push(tree.nodes[id].control.clone().expect("edge control"));
                    match tree.nodes[id].children.first() {
                        Some(&c) => id = c,
                        None => break,
                    }
                }
                Ok((sol.root_policy, controls))
            }
        }
    }
}

/// Executed root action for every player.
fn act(policy: &[GMMPolicy], x: &JointState, execution: Execution, rng: &mut dyn RngCore) -> Result<JointControl> {
    match execution {
        Execution::Sampled => scenario::sample_root_action(policy, x, rng),
        Execution::Mean => JointControl::new(policy.iter().map(|p| p.mean(&x.0)).collect()),
    }
}

/// Executed trajectory and metrics of one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub method: Method,
    pub trial: usize,
    /// `sim_length + 1` rows of per-agent `[x, y, heading, speed]`, flattened.
    pub states: Vec<Vec<f64>>,
    /// `sim_length` rows of stacked controls.
    pub controls: Vec<Vec<f64>>,
    /// Realized task cost per step and player.
    pub stage_costs: Vec<Vec<f64>>,
    pub coordinated: bool,
    pub safe: bool,
    pub progress: f64,
    pub min_distance: f64,
    pub time_avg_cost: f64,
    /// Solver error that ended the trial early, if any.
    pub failure: Option<String>,
}

/// `true` when the last state puts the first two agents in distinct lane bands.
pub fn metric_coordinated(cost: &TollboothCost, states: &[Vec<f64>]) -> bool {
    let Some(last) = states.last() else { return false };
    if last.len() < 8 {
        return false;
    }
    match (cost.lane_of(last[1]), cost.lane_of(last[5])) {
        (Some(a), Some(b)) => a != b,
        _ => false,
    }
}

/// Smallest planar distance between any two agents over the trajectory.
pub fn min_distance(states: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for s in states {
        let n = s.len() / 4;
        for a in 0..n {
            for b in a + 1..n {
                let d = ((s[4 * a] - s[4 * b]).powi(2) + (s[4 * a + 1] - s[4 * b + 1]).powi(2)).sqrt();
                best = best.min(d);
            }
        }
    }
    best
}

/// No two agents within `collision_radius` and every agent within the road at all steps.
pub fn metric_safe(cost: &TollboothCost, states: &[Vec<f64>]) -> bool {
    min_distance(states) > cost.collision_radius
        && states
            .iter()
            .all(|s| s.chunks(4).all(|a| a[1].is_finite() && a[1].abs() <= cost.half_width))
}

/// Longitudinal displacement of agent 0.
pub fn metric_progress(states: &[Vec<f64>]) -> f64 {
    match (states.first(), states.last()) {
        (Some(a), Some(b)) => b[0] - a[0],
        _ => 0.0,
    }
}

/// Mean over steps of the players' summed realized costs.
pub fn metric_cost(stage_costs: &[Vec<f64>]) -> f64 {
    if stage_costs.is_empty() {
        return 0.0;
    }
    stage_costs.iter().map(|c| c.iter().sum::<f64>()).sum::<f64>() / stage_costs.len() as f64
}

/// Per-trial RNG: the batch seed selects the generator, the trial index its stream.
pub fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

/// Runs one receding-horizon trial. Solver failures end the trial early and are
/// recorded in [`TrialResult::failure`].
pub fn run_trial(spec: &ScenarioSpec, method: Method, trial: usize, rng: &mut dyn RngCore) -> Result<TrialResult> {
    let planner = Planner::new(spec, method)?;
    let dynamics = spec.dynamics();
    let cost = spec.cost.build()?;
    let np = spec.n_players();
    let mut x = spec.x0();
    let mut states = vec![x.0.as_slice().to_vec()];
    let mut controls = vec![];
    let mut stage_costs = vec![];
    let mut warm: Option<Vec<JointControl>> = None;
    let mut failure = None;
    let mut t = 0;
    'outer: while t < spec.sim_length {
        let (policy, mut plan) = match planner.plan(&x, warm.as_deref(), &spec.solver) {
            Ok(p) => p,
            Err(e) => {
                failure = Some(format!("step {t}: {e}"));
                break;
            }
        };
        let steps = spec.replan_interval.min(spec.sim_length - t);
        for k in 0..steps {
            // between replans the planned nominal controls run open loop
            let u = if k == 0 {
                act(&policy, &x, spec.execution, rng)?
            } else {
                plan[k].clone()
            };
            stage_costs.push((0..np).map(|i| cost.evaluate(i, &x, &u)).collect());
            x = match dynamics.step(&x, &u) {
                Ok(next) => next,
                Err(e) => {
                    failure = Some(format!("step {t}: {e}"));
                    break 'outer;
                }
            };
            controls.push(u.stacked().as_slice().to_vec());
            states.push(x.0.as_slice().to_vec());
            t += 1;
        }
        // drop the executed prefix and pad with the last planned control
        plan.drain(..steps);
        let last = plan.last().cloned().unwrap_or_else(|| JointControl::zeros(&vec![2; np]));
        plan.resize(spec.planning_horizon, last);
        warm = Some(plan);
    }
    Ok(TrialResult {
        method,
        trial,
        coordinated: metric_coordinated(&spec.cost, &states),
        safe: failure.is_none() && metric_safe(&spec.cost, &states),
        progress: metric_progress(&states),
        min_distance: min_distance(&states),
        time_avg_cost: metric_cost(&stage_costs),
        states,
        controls,
        stage_costs,
        failure,
    })
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return MeanStd { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

/// Aggregates of one method's batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub coordination_rate: MeanStd,
    pub safety_rate: MeanStd,
    pub progress: MeanStd,
    pub min_distance: MeanStd,
    pub cost: MeanStd,
    pub failures: usize,
}

/// All trials of one method plus aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchResult {
    pub method: Method,
    pub n_trials: usize,
    pub seed: u64,
    pub stats: BatchStats,
    /// Mean over trials of the summed realized cost at each step.
    pub cost_curve: Vec<f64>,
    pub trials: Vec<TrialResult>,
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Runs `n_trials` independent trials (in parallel) and aggregates them. Trial `k`
/// draws from [`trial_rng`]`(seed, k)`, so results do not depend on scheduling.
pub fn run_batch(spec: &ScenarioSpec, method: Method, n_trials: usize, seed: u64) -> Result<BatchResult> {
    if n_trials == 0 {
        return Err(KlError::Precondition("n_trials must be >= 1".into()));
    }
    spec.validate()?;
    let trials = par::map_indices(n_trials, |k| run_trial(spec, method, k, &mut trial_rng(seed, k)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let col = |f: &dyn Fn(&TrialResult) -> f64| MeanStd::of(&trials.iter().map(f).collect::<Vec<_>>());
    let stats = BatchStats {
        coordination_rate: col(&|t| flag(t.coordinated)),
        safety_rate: col(&|t| flag(t.safe)),
        progress: col(&|t| t.progress),
        min_distance: col(&|t| t.min_distance),
        cost: col(&|t| t.time_avg_cost),
        failures: trials.iter().filter(|t| t.failure.is_some()).count(),
    };
    let steps = trials.iter().map(|t| t.stage_costs.len()).max().unwrap_or(0);
    let cost_curve = (0..steps)
        .map(|s| {
            let v: Vec<f64> = trials.iter().filter_map(|t| t.stage_costs.get(s)).map(|c| c.iter().sum()).collect();
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect();
    Ok(BatchResult {
        method,
        n_trials,
        seed,
        stats,
        cost_curve,
        trials,
    })
}
