//! Random linear-quadratic-Gaussian games for property tests and benchmarks, and
//! the solver scaling measurement.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{GameCostSet, PlayerCost, QuadraticStageCost, QuadraticTerm};
use crate::dynamics::{LinearDynamics, LinearGameStage};
use crate::error::{KlError, Result};
use crate::game::JointState;
use crate::ilq::{solve, LQLConfig, Problem};
use crate::klqg::{KLWeights, Reference};
use crate::reference::{FeedbackGaussianRef, GaussianRef};

/// A fully specified KL-LQG game.
#[derive(Debug, Clone)]
pub struct LqGame {
    pub stages: Vec<LinearGameStage>,
    pub costs: Vec<Vec<QuadraticStageCost>>,
    pub refs: Vec<Reference>,
    pub lambda: KLWeights,
}

impl LqGame {
    /// Copies stage 0 dynamics and costs to every step.
    pub fn time_invariant(mut self) -> Self {
        let horizon = self.stages.len();
        self.stages = vec![self.stages[0].clone(); horizon];
        self.costs = vec![self.costs[0].clone(); horizon];
        self
    }

    /// The same game as a nonlinear-solver problem, using stage 0 dynamics and
    /// costs for every step.
    pub fn to_problem(&self, dt: f64) -> Result<Problem> {
        let stage = &self.stages[0];
        let dynamics = LinearDynamics::from_stage(stage, dt)?;
        let players = self.costs[0].iter().map(|c| PlayerCost::new().with(QuadraticTerm(c.clone()))).collect();
        let cost = GameCostSet::new(stage.state_dim(), stage.control_dims(), players)?;
        Problem::new(
            Arc::new(dynamics),
            Arc::new(cost),
            self.refs.iter().cloned().map(Into::into).collect(),
            self.lambda.clone(),
            self.stages.len(),
        )
    }
}

/// Which reference family a random game uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefKind {
    Open,
    Feedback,
}

fn randn<R: Rng + ?Sized>(rng: &mut R, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| { let z: f64 = StandardNormal.sample(&mut *rng); scale * z })
}

fn randn_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| { let z: f64 = StandardNormal.sample(&mut *rng); scale * z })
}

/// `G Gᵀ / k + floor·I` for a random `k×k` Gaussian `G`.
pub fn random_spd<R: Rng + ?Sized>(rng: &mut R, k: usize, floor: f64) -> DMatrix<f64> {
    let g = randn(rng, k, k, 1.0);
    let m = &g * g.transpose() / k as f64 + DMatrix::identity(k, k) * floor;
    (&m + m.transpose()) * 0.5
}

/// Random stable-ish game: `A = I + 0.1·G`, `B^i` Gaussian, small drift, costs
/// with `Q ⪰ 0.1 I`, `R^ii ⪰ 0.5 I`, references with covariances `⪰ 0.2 I`, and
/// `λ^i ∈ [0.1, 2]`.
pub fn random_lq_game<R: Rng + ?Sized>(
    rng: &mut R,
    state_dim: usize,
    control_dims: &[usize],
    horizon: usize,
    kind: RefKind,
) -> LqGame {
    let n = state_dim;
    let np = control_dims.len();
    let mut stages = Vec::with_capacity(horizon);
    let mut costs = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let a = DMatrix::identity(n, n) + randn(rng, n, n, 0.1);
        let b = control_dims.iter().map(|&m| randn(rng, n, m, 0.5)).collect();
        let drift = randn_vec(rng, n, 0.1);
        let noise = random_spd(rng, n, 0.0) * 0.01;
        stages.push(LinearGameStage { a, b, drift, noise_cov: noise });
        let stage_costs = (0..np)
            .map(|i| {
                let r_uu = control_dims
                    .iter()
                    .enumerate()
                    .map(|(j, &m)| if i == j { random_spd(rng, m, 0.5) } else { random_spd(rng, m, 0.0) * 0.1 })
                    .collect();
                let r_u = control_dims.iter().map(|&m| randn_vec(rng, m, 0.1)).collect();
                QuadraticStageCost::new(random_spd(rng, n, 0.1), randn_vec(rng, n, 0.1), r_uu, r_u)
            })
            .collect();
        costs.push(stage_costs);
    }
    let refs = control_dims
        .iter()
        .map(|&m| {
            let means: Vec<DVector<f64>> = (0..horizon).map(|_| randn_vec(rng, m, 0.5)).collect();
            let covs: Vec<DMatrix<f64>> = (0..horizon).map(|_| random_spd(rng, m, 0.2)).collect();
            match kind {
                RefKind::Open => Reference::Open(GaussianRef::new(means, covs).expect("valid random reference")),
                RefKind::Feedback => {
                    let gains = (0..horizon).map(|_| randn(rng, m, n, 0.2)).collect();
                    Reference::Feedback(FeedbackGaussianRef::new(gains, means, covs).expect("valid random reference"))
                }
            }
        })
        .collect();
    let lambda = KLWeights::new((0..np).map(|_| rng.random_range(0.1..2.0)).collect()).expect("positive weights");
    LqGame {
        stages,
        costs,
        refs,
        lambda,
    }
}

/// Random LQ game with `n_players` agents of 4 states and 2 controls each, as a
/// time-invariant nonlinear-solver problem, plus a random initial state. The
/// stage data depends on `seed` and `n_players` only, so horizons are comparable.
pub fn scaling_problem(n_players: usize, horizon: usize, seed: u64) -> Result<(Problem, JointState)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 4 * n_players;
    let game = random_lq_game(&mut rng, n, &vec![2; n_players], 1, RefKind::Open);
    let x0 = JointState(randn_vec(&mut rng, n, 1.0));
    Ok((game.to_problem(0.1)?.with_horizon(horizon), x0))
}

/// Timing summary of repeated fixed-budget solves, in seconds per iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub players: usize,
    pub state_dim: usize,
    pub horizon: usize,
    pub repeats: usize,
    pub iterations: usize,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub worst: f64,
}

/// Times `repeats` solves of [`scaling_problem`] with exactly `iterations`
/// backward passes and `halvings` line-search halvings each, on the current pool.
pub fn time_solves(n_players: usize, horizon: usize, repeats: usize, iterations: usize, halvings: usize, seed: u64) -> Result<ScalingPoint> {
    let (problem, x0) = scaling_problem(n_players, horizon, seed)?;
    let config = LQLConfig::fixed_iterations(iterations, halvings);
    // warm-up solve, also checks the budget
    let sol = solve(&problem, &x0, None, &config)?;
    if sol.iterations_used != iterations {
        return Err(KlError::Numerical(format!("solver ran {} of {iterations} iterations", sol.iterations_used)));
    }
    let mut per_iter = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let sol = solve(&problem, &x0, None, &config)?;
        per_iter.push(start.elapsed().as_secs_f64() / sol.iterations_used as f64);
    }
    let n = per_iter.len().max(1) as f64;
    let mean = per_iter.iter().sum::<f64>() / n;
    let std = (per_iter.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut sorted = per_iter.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(ScalingPoint {
        players: n_players,
        state_dim: 4 * n_players,
        horizon,
        repeats,
        iterations,
        mean,
        std,
        median: sorted.get(sorted.len() / 2).copied().unwrap_or(f64::NAN),
        worst: sorted.last().copied().unwrap_or(f64::NAN),
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}
