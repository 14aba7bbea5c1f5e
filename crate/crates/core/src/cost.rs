//! Per-player stage costs: a term library with analytic derivatives, and the
//! quadraticization consumed by the LQL backward pass.

use std::fmt::Debug;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::KinematicBicycle;
use crate::error::{dim_err, KlError, Result};
use crate::game::{JointControl, JointState};
use crate::linalg::{all_finite_mat, all_finite_vec, eigen_floor, max_asymmetry, min_eigenvalue, psd_project};

/// Eigenvalue floor applied to `Q` and `R^ii` during quadraticization.
pub const HESSIAN_FLOOR: f64 = 1e-6;
/// Minimum eigenvalue accepted for `R^ii`.
pub const MIN_CONTROL_CURVATURE: f64 = 1e-9;

/// `l(x, u) = ½xᵀQx + qᵀx + Σ_j (½uʲᵀ R^j uʲ + r^jᵀ uʲ)` for one player.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticStageCost {
    pub q_xx: DMatrix<f64>,
    pub q_x: DVector<f64>,
    pub r_uu: Vec<DMatrix<f64>>,
    pub r_u: Vec<DVector<f64>>,
}

impl QuadraticStageCost {
    pub fn new(q_xx: DMatrix<f64>, q_x: DVector<f64>, r_uu: Vec<DMatrix<f64>>, r_u: Vec<DVector<f64>>) -> Self {
        QuadraticStageCost { q_xx, q_x, r_uu, r_u }
    }

    /// Pure quadratic (no linear terms).
    pub fn pure(q_xx: DMatrix<f64>, r_uu: Vec<DMatrix<f64>>) -> Self {
        let n = q_xx.nrows();
        let r_u = r_uu.iter().map(|r| DVector::zeros(r.nrows())).collect();
        QuadraticStageCost {
            q_xx,
            q_x: DVector::zeros(n),
            r_uu,
            r_u,
        }
    }

    pub fn evaluate(&self, x: &DVector<f64>, u: &JointControl) -> f64 {
        let mut v = 0.5 * x.dot(&(&self.q_xx * x)) + self.q_x.dot(x);
        for ((r, rl), uj) in self.r_uu.iter().zip(&self.r_u).zip(&u.per_player) {
            v += 0.5 * uj.dot(&(r * uj)) + rl.dot(uj);
        }
        v
    }

    /// Checks the shape, symmetry and definiteness requirements for `player`'s cost.
    pub fn validate(&self, player: usize, state_dim: usize, control_dims: &[usize]) -> Result<()> {
        if self.q_xx.shape() != (state_dim, state_dim) || self.q_x.len() != state_dim {
            return dim_err(format!("player {player}: Q/q shape mismatch"));
        }
        if self.r_uu.len() != control_dims.len() || self.r_u.len() != control_dims.len() {
            return dim_err(format!("player {player}: need one R/r block per player"));
        }
        for (j, &m) in control_dims.iter().enumerate() {
            if self.r_uu[j].shape() != (m, m) || self.r_u[j].len() != m {
                return dim_err(format!("player {player}: R^{player}{j} shape mismatch"));
            }
        }
        let finite = all_finite_mat(&self.q_xx)
            && all_finite_vec(&self.q_x)
            && self.r_uu.iter().all(all_finite_mat)
            && self.r_u.iter().all(all_finite_vec);
        if !finite {
            return Err(KlError::Numerical(format!("player {player}: non-finite cost entries")));
        }
        let asym = std::iter::once(&self.q_xx).chain(&self.r_uu).map(max_asymmetry).fold(0.0, f64::max);
        if asym > 1e-12 {
            return Err(KlError::Precondition(format!("player {player}: cost matrices not symmetric")));
        }
        if min_eigenvalue(&self.q_xx) < -1e-12 {
            return Err(KlError::Precondition(format!("player {player}: Q is not PSD")));
        }
        for (j, r) in self.r_uu.iter().enumerate() {
            let min = min_eigenvalue(r);
            if j == player && min < MIN_CONTROL_CURVATURE {
                return Err(KlError::Precondition(format!(
                    "player {player}: R^ii must be positive definite (min eigenvalue {min:.3e})"
                )));
            }
            if j != player && min < -1e-12 {
                return Err(KlError::Precondition(format!("player {player}: R^{player}{j} is not PSD")));
            }
        }
        Ok(())
    }
}

/// Value, gradients and Hessians of one player's stage cost. Mixed state-control
/// second derivatives are not represented; every built-in term is separable.
#[derive(Debug, Clone, PartialEq)]
pub struct CostDerivatives {
    pub value: f64,
    pub grad_x: DVector<f64>,
    pub hess_x: DMatrix<f64>,
    pub grad_u: Vec<DVector<f64>>,
    pub hess_u: Vec<DMatrix<f64>>,
}

impl CostDerivatives {
    pub fn zeros(state_dim: usize, control_dims: &[usize]) -> Self {
        CostDerivatives {
            value: 0.0,
            grad_x: DVector::zeros(state_dim),
            hess_x: DMatrix::zeros(state_dim, state_dim),
            grad_u: control_dims.iter().map(|&m| DVector::zeros(m)).collect(),
            hess_u: control_dims.iter().map(|&m| DMatrix::zeros(m, m)).collect(),
        }
    }

    fn is_finite(&self) -> bool {
        self.value.is_finite()
            && all_finite_vec(&self.grad_x)
            && all_finite_mat(&self.hess_x)
            && self.grad_u.iter().all(all_finite_vec)
            && self.hess_u.iter().all(all_finite_mat)
    }
}

/// One additive piece of a player's stage cost.
pub trait CostTerm: Debug + Send + Sync {
    fn value(&self, x: &DVector<f64>, u: &JointControl) -> f64;

    /// Adds this term's value, gradients and Hessians into `acc`.
    fn accumulate(&self, x: &DVector<f64>, u: &JointControl, acc: &mut CostDerivatives);
}

/// All players' stage costs.
pub trait GameCost: Send + Sync {
    fn n_players(&self) -> usize;

    fn evaluate(&self, player: usize, x: &JointState, u: &JointControl) -> f64;

    fn derivatives(&self, player: usize, x: &JointState, u: &JointControl) -> CostDerivatives;

    /// Local quadratic model in deviation coordinates around `(x̄, ū)`: the linear
    /// terms are the gradients at the nominal, and `Q`, `R^ii` are floored at
    /// [`HESSIAN_FLOOR`] while `R^ij` (j ≠ i) are projected to PSD.
    fn quadraticize(&self, player: usize, x: &JointState, u: &JointControl) -> Result<QuadraticStageCost> {
        let d = self.derivatives(player, x, u);
        if !d.is_finite() {
            return Err(KlError::Numerical(format!("player {player}: non-finite cost derivatives")));
        }
        let q_xx = eigen_floor(&d.hess_x, HESSIAN_FLOOR)?;
        let r_uu = d
            .hess_u
            .iter()
            .enumerate()
            .map(|(j, h)| {
                if j == player {
                    eigen_floor(h, HESSIAN_FLOOR)
                } else {
                    psd_project(h)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(QuadraticStageCost {
            q_xx,
            q_x: d.grad_x,
            r_uu,
            r_u: d.grad_u,
        })
    }

    /// Sum over players of the stage cost.
    fn total(&self, x: &JointState, u: &JointControl) -> f64 {
        (0..self.n_players()).map(|i| self.evaluate(i, x, u)).sum()
    }
}

/// A player's cost as a sum of terms.
#[derive(Debug, Default)]
pub struct PlayerCost {
    pub terms: Vec<Box<dyn CostTerm>>,
}

impl PlayerCost {
    pub fn new() -> Self {
        PlayerCost { terms: Vec::new() }
    }

    pub fn with(mut self, term: impl CostTerm + 'static) -> Self {
        self.terms.push(Box::new(term));
        self
    }

    pub fn push(&mut self, term: Box<dyn CostTerm>) {
        self.terms.push(term);
    }
}

/// Per-player term sums over a fixed joint layout.
#[derive(Debug)]
pub struct GameCostSet {
    state_dim: usize,
    control_dims: Vec<usize>,
    players: Vec<PlayerCost>,
}

impl GameCostSet {
    pub fn new(state_dim: usize, control_dims: Vec<usize>, players: Vec<PlayerCost>) -> Result<Self> {
        if players.len() != control_dims.len() {
            return dim_err(format!(
                "{} player costs for {} players",
                players.len(),
                control_dims.len()
            ));
        }
        Ok(GameCostSet {
            state_dim,
            control_dims,
            players,
        })
    }

    pub fn player(&self, i: usize) -> &PlayerCost {
        &self.players[i]
    }
}

impl GameCost for GameCostSet {
    fn n_players(&self) -> usize {
        self.players.len()
    }

    fn evaluate(&self, player: usize, x: &JointState, u: &JointControl) -> f64 {
        self.players[player].terms.iter().map(|t| t.value(&x.0, u)).sum()
    }

    fn derivatives(&self, player: usize, x: &JointState, u: &JointControl) -> CostDerivatives {
        let mut acc = CostDerivatives::zeros(self.state_dim, &self.control_dims);
        for term in &self.players[player].terms {
            term.accumulate(&x.0, u, &mut acc);
        }
        acc
    }
}

/// Generic quadratic term, the building block of LQ games.
#[derive(Debug, Clone)]
pub struct QuadraticTerm(pub QuadraticStageCost);

impl CostTerm for QuadraticTerm {
    fn value(&self, x: &DVector<f64>, u: &JointControl) -> f64 {
        self.0.evaluate(x, u)
    }

    fn accumulate(&self, x: &DVector<f64>, u: &JointControl, acc: &mut CostDerivatives) {
        let c = &self.0;
        acc.value += c.evaluate(x, u);
        acc.grad_x += &c.q_xx * x + &c.q_x;
        acc.hess_x += &c.q_xx;
        for (j, uj) in u.per_player.iter().enumerate() {
            acc.grad_u[j] += &c.r_uu[j] * uj + &c.r_u[j];
            acc.hess_u[j] += &c.r_uu[j];
        }
    }
}

fn y_index(agent: usize) -> usize {
    KinematicBicycle::index(agent, KinematicBicycle::Y)
}

/// Soft-min over lane-center wells on an agent's lateral position:
/// `-w·τ·log Σ_k exp(-(y - c_k)²/τ)`.
#[derive(Debug, Clone)]
pub struct LaneCentering {
    pub agent: usize,
    pub centers: Vec<f64>,
    pub weight: f64,
    pub temperature: f64,
}

impl LaneCentering {
    /// Returns (value, d/dy, d²/dy²).
    fn scalar(&self, y: f64) -> (f64, f64, f64) {
        let tau = self.temperature;
        let e: Vec<f64> = self.centers.iter().map(|c| -(y - c) * (y - c) / tau).collect();
        let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = e.iter().map(|v| (v - m).exp()).sum();
        let value = -self.weight * tau * (m + s.ln());
        let (mut mean_d, mut mean_d2) = (0.0, 0.0);
        for (c, v) in self.centers.iter().zip(&e) {
            let p = (v - m).exp() / s;
            mean_d += p * (y - c);
            mean_d2 += p * (y - c) * (y - c);
        }
        let grad = 2.0 * self.weight * mean_d;
        let hess = 2.0 * self.weight - 4.0 * self.weight / tau * (mean_d2 - mean_d * mean_d);
        (value, grad, hess)
    }
}

impl CostTerm for LaneCentering {
    fn value(&self, x: &DVector<f64>, _u: &JointControl) -> f64 {
        self.scalar(x[y_index(self.agent)]).0
    }

    fn accumulate(&self, x: &DVector<f64>, _u: &JointControl, acc: &mut CostDerivatives) {
        let k = y_index(self.agent);
        let (v, g, h) = self.scalar(x[k]);
        acc.value += v;
        acc.grad_x[k] += g;
        acc.hess_x[(k, k)] += h;
    }
}

/// Quadratic pull `w·(s - target)²` on one state coordinate.
#[derive(Debug, Clone)]
pub struct StateTracking {
    pub index: usize,
    pub target: f64,
    pub weight: f64,
}

impl StateTracking {
    pub fn lane(agent: usize, center: f64, weight: f64) -> Self {
        StateTracking {
            index: y_index(agent),
            target: center,
            weight,
        }
    }

    pub fn speed(agent: usize, target: f64, weight: f64) -> Self {
        StateTracking {
            index: KinematicBicycle::index(agent, KinematicBicycle::SPEED),
            target,
            weight,
        }
    }

    pub fn heading(agent: usize, weight: f64) -> Self {
        StateTracking {
            index: KinematicBicycle::index(agent, KinematicBicycle::HEADING),
            target: 0.0,
            weight,
        }
    }
}

impl CostTerm for StateTracking {
    fn value(&self, x: &DVector<f64>, _u: &JointControl) -> f64 {
        let d = x[self.index] - self.target;
        self.weight * d * d
    }

    fn accumulate(&self, x: &DVector<f64>, u: &JointControl, acc: &mut CostDerivatives) {
        let d = x[self.index] - self.target;
        acc.value += self.value(x, u);
        acc.grad_x[self.index] += 2.0 * self.weight * d;
        acc.hess_x[(self.index, self.index)] += 2.0 * self.weight;
    }
}

/// Penalty `w·exp(-(y_a - y_b)²/σ²)` on two agents sharing a lateral position.
#[derive(Debug, Clone)]
pub struct Coordination {
    pub agent_a: usize,
    pub agent_b: usize,
    pub weight: f64,
    pub sigma: f64,
}

impl CostTerm for Coordination {
    fn value(&self, x: &DVector<f64>, _u: &JointControl) -> f64 {
        let d = x[y_index(self.agent_a)] - x[y_index(self.agent_b)];
        self.weight * (-d * d / (self.sigma * self.sigma)).exp()
    }

    fn accumulate(&self, x: &DVector<f64>, u: &JointControl, acc: &mut CostDerivatives) {
        let (a, b) = (y_index(self.agent_a), y_index(self.agent_b));
        let s2 = self.sigma * self.sigma;
        let d = x[a] - x[b];
        let f = self.value(x, u);
        let g = -2.0 * d / s2 * f;
        let h = f * (4.0 * d * d / (s2 * s2) - 2.0 / s2);
        acc.value += f;
        acc.grad_x[a] += g;
        acc.grad_x[b] -= g;
        acc.hess_x[(a, a)] += h;
        acc.hess_x[(b, b)] += h;
        acc.hess_x[(a, b)] -= h;
        acc.hess_x[(b, a)] -= h;
    }
}

/// Smooth proximity penalty `w·exp(-(d² - r²)/s)` with `s = r²/4` on the planar
/// distance between two agents.
#[derive(Debug, Clone)]
pub struct Collision {
    pub agent_a: usize,
    pub agent_b: usize,
    pub weight: f64,
    pub radius: f64,
}

impl Collision {
    fn scale(&self) -> f64 {
        self.radius * self.radius / 4.0
    }

    fn indices(&self) -> [usize; 4] {
        [
            KinematicBicycle::index(self.agent_a, KinematicBicycle::X),
            y_index(self.agent_a),
            KinematicBicycle::index(self.agent_b, KinematicBicycle::X),
            y_index(self.agent_b),
        ]
    }
}

impl CostTerm for Collision {
    fn value(&self, x: &DVector<f64>, _u: &JointControl) -> f64 {
        let [xa, ya, xb, yb] = self.indices();
        let d2 = (x[xa] - x[xb]).powi(2) + (x[ya] - x[yb]).powi(2);
        self.weight * (-(d2 - self.radius * self.radius) / self.scale()).exp()
    }

    fn accumulate(&self, x: &DVector<f64>, u: &JointControl, acc: &mut CostDerivatives) {
        let idx = self.indices();
        let s = self.scale();
        let f = self.value(x, u);
        let (dx, dy) = (x[idx[0]] - x[idx[2]], x[idx[1]] - x[idx[3]]);
        // gradient of d² with respect to (xa, ya, xb, yb)
        let gd = [2.0 * dx, 2.0 * dy, -2.0 * dx, -2.0 * dy];
        // Hessian of d²: 2 on matching coordinates, -2 across agents
        let hd = |p: usize, q: usize| -> f64 {
            if p % 2 != q % 2 {
                0.0
            } else if p == q {
                2.0
            } else {
                -2.0
            }
        };
        acc.value += f;
        for p in 0..4 {
            acc.grad_x[idx[p]] += -f / s * gd[p];
            for q in 0..4 {
                acc.hess_x[(idx[p], idx[q])] += f * (gd[p] * gd[q] / (s * s) - hd(p, q) / s);
            }
        }
    }
}

/// Quadratic penalty on lateral positions beyond `half_width - margin`.
#[derive(Debug, Clone)]
pub struct Boundary {
    pub agent: usize,
    pub half_width: f64,
    pub margin: f64,
    pub weight: f64,
}

impl CostTerm for Boundary {
    fn value(&self, x: &DVector<f64>, _u: &JointControl) -> f64 {
        let excess = (x[y_index(self.agent)].abs() - (self.half_width - self.margin)).max(0.0);
        self.weight * excess * excess
    }

    fn accumulate(&self, x: &DVector<f64>, u: &JointControl, acc: &mut CostDerivatives) {
        let k = y_index(self.agent);
        let y = x[k];
        let excess = y.abs() - (self.half_width - self.margin);
        if excess > 0.0 {
            acc.value += self.value(x, u);
            acc.grad_x[k] += 2.0 * self.weight * excess * y.signum();
            acc.hess_x[(k, k)] += 2.0 * self.weight;
        }
    }
}

/// `½ Σ_k w_k u_k²` on one player's control.
#[derive(Debug, Clone)]
pub struct ControlEffort {
    pub player: usize,
    pub weights: Vec<f64>,
}

impl CostTerm for ControlEffort {
    fn value(&self, _x: &DVector<f64>, u: &JointControl) -> f64 {
        let up = &u.per_player[self.player];
        0.5 * self.weights.iter().zip(up.iter()).map(|(w, v)| w * v * v).sum::<f64>()
    }

    fn accumulate(&self, x: &DVector<f64>, u: &JointControl, acc: &mut CostDerivatives) {
        acc.value += self.value(x, u);
        let up = &u.per_player[self.player];
        for (k, w) in self.weights.iter().enumerate() {
            acc.grad_u[self.player][k] += w * up[k];
            acc.hess_u[self.player][(k, k)] += w;
        }
    }
}

/// Per-player settings of the tollbooth cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TollboothPlayer {
    pub target_speed: f64,
    /// Index into `lane_centers` of a lane this player is pulled toward.
    #[serde(default)]
    pub preferred_lane: Option<usize>,
    #[serde(default)]
    pub preference_weight: f64,
    /// Whether this player pays the same-lane coordination penalty.
    #[serde(default = "default_true")]
    pub coordination: bool,
}

fn default_true() -> bool {
    true
}

/// Two-lane tollbooth cost layout on kinematic-bicycle agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TollboothCost {
    pub lane_centers: Vec<f64>,
    pub lane_width: f64,
    pub half_width: f64,
    pub lane_weight: f64,
    pub lane_temperature: f64,
    pub coordination_weight: f64,
    pub coordination_sigma: f64,
    pub collision_weight: f64,
    pub collision_radius: f64,
    pub boundary_weight: f64,
    pub boundary_margin: f64,
    pub speed_weight: f64,
    pub heading_weight: f64,
    /// Diagonal control weights `[accel, yaw_rate]`.
    pub control_weights: Vec<f64>,
    pub players: Vec<TollboothPlayer>,
}

impl TollboothCost {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.lane_weight,
            self.coordination_weight,
            self.collision_weight,
            self.boundary_weight,
            self.speed_weight,
            self.heading_weight,
        ];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(KlError::Precondition("cost weights must be finite and >= 0".into()));
        }
        if !(self.collision_radius > 0.0) {
            return Err(KlError::Precondition("collision_radius must be > 0".into()));
        }
        if !(self.lane_temperature > 0.0) || !(self.coordination_sigma > 0.0) {
            return Err(KlError::Precondition("lane_temperature and coordination_sigma must be > 0".into()));
        }
        if self.lane_centers.is_empty() || !(self.lane_width > 0.0) || !(self.half_width > 0.0) {
            return Err(KlError::Precondition("need at least one lane and positive widths".into()));
        }
        if self.control_weights.len() != 2 || self.control_weights.iter().any(|w| !(*w >= MIN_CONTROL_CURVATURE)) {
            return Err(KlError::Precondition(
                "control_weights must be two positive entries (R^ii must be positive definite)".into(),
            ));
        }
        if self.players.is_empty() {
            return Err(KlError::Precondition("at least one player required".into()));
        }
        for (i, p) in self.players.iter().enumerate() {
            if let Some(l) = p.preferred_lane {
                if l >= self.lane_centers.len() {
                    return Err(KlError::Precondition(format!("player {i}: preferred_lane out of range")));
                }
            }
            if !(p.preference_weight >= 0.0) {
                return Err(KlError::Precondition(format!("player {i}: preference_weight must be >= 0")));
            }
        }
        Ok(())
    }

    /// Index of the lane band containing `y`, if any.
    pub fn lane_of(&self, y: f64) -> Option<usize> {
        self.lane_centers.iter().position(|c| (y - c).abs() <= 0.5 * self.lane_width)
    }

    pub fn build(&self) -> Result<GameCostSet> {
        self.validate()?;
        let n = self.players.len();
        let mut players = Vec::with_capacity(n);
        for (i, p) in self.players.iter().enumerate() {
            let mut cost = PlayerCost::new()
                .with(LaneCentering {
                    agent: i,
                    centers: self.lane_centers.clone(),
                    weight: self.lane_weight,
                    temperature: self.lane_temperature,
                })
                .with(Boundary {
                    agent: i,
                    half_width: self.half_width,
                    margin: self.boundary_margin,
                    weight: self.boundary_weight,
                })
                .with(StateTracking::speed(i, p.target_speed, self.speed_weight))
                .with(StateTracking::heading(i, self.heading_weight))
                .with(ControlEffort {
                    player: i,
                    weights: self.control_weights.clone(),
                });
            if let Some(l) = p.preferred_lane {
                cost = cost.with(StateTracking::lane(i, self.lane_centers[l], p.preference_weight));
            }
            for j in (0..n).filter(|&j| j != i) {
                if p.coordination {
                    cost = cost.with(Coordination {
                        agent_a: i,
                        agent_b: j,
                        weight: self.coordination_weight,
                        sigma: self.coordination_sigma,
                    });
                }
                cost = cost.with(Collision {
                    agent_a: i,
                    agent_b: j,
                    weight: self.collision_weight,
                    radius: self.collision_radius,
                });
            }
            players.push(cost);
        }
        GameCostSet::new(4 * n, vec![2; n], players)
    }
}
